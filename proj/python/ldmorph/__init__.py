"""Latent-diffusion-guided 2D deformable registration (numpy front end)."""

import torch  # noqa: F401  loads the libtorch shared libraries first

from ._core import (
    RunConfig,
    dsc,
    folding_percent,
    generate_phantom_pair,
    jacobian_determinant,
    loss_org,
    loss_smooth,
    noise_schedule,
    preprocess,
    q_sample,
    random_smooth_field,
    register_pair,
    warp_image,
    warp_labels,
)

__all__ = [
    "RunConfig",
    "dsc",
    "folding_percent",
    "generate_phantom_pair",
    "jacobian_determinant",
    "loss_org",
    "loss_smooth",
    "noise_schedule",
    "preprocess",
    "q_sample",
    "random_smooth_field",
    "register_pair",
    "warp_image",
    "warp_labels",
]
