"""Shared test fixtures: a grid/model configuration small enough that a
full training run takes a couple of seconds."""

from dgfnet.config import (
    DataSection,
    ExperimentConfig,
    GridSection,
    ModelSection,
    OptimSection,
)


def tiny_config(tmp_path, fusion="dgfm+attention", **optim_over) -> ExperimentConfig:
    optim = dict(lr=3e-3, weight_decay=1e-4, epochs=2, batch_size=4,
                 checkpoint_every_steps=2, eval_examples_per_epoch=2)
    optim.update(optim_over)
    return ExperimentConfig(
        seed=5,
        out_root=str(tmp_path),
        data=DataSection(n_classes=4, k_sources=2, n_train=12, n_test=4,
                         duration=0.101, c_o=8, c_m=6, t_motion=4),
        grid=GridSection(window_len=126, hop=32, target_frames=32, log_bins=32),
        model=ModelSection(fusion=fusion, depth=3, base_channels=4, c_a=16,
                           c_final=8, c_q=16, heads=2, decoder_layers=1,
                           attention_groups=2, mask_floor=0.1),
        optim=OptimSection(**optim),
    )
