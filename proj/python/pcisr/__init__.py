"""Parallel compressive super-resolution imaging: Python bindings to the C++ core."""

from ._core import (  # noqa: F401
    OTF,
    ConfigError,
    Error,
    FormatError,
    NumericError,
    ShapeError,
    TapeError,
    gi_reconstruct,
    load_otf,
    load_tensor,
    make_ideal_otf,
    make_synthetic_dataset,
    pci_measure,
    perturb_otf,
    psnr,
    random_masks,
    read_pgm,
    render_chart,
    run_cli,
    save_otf,
    save_tensor,
    ssim,
    stripe_contrast,
    tv_reconstruct,
    write_pgm,
)
