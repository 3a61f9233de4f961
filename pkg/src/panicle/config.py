"""Pipeline configuration: sectioned key-value files with full defaults.

Every tunable constant in the pipeline appears here with its default, so a
config file only needs the keys it overrides.  The canonical serialization
is hashed into run manifests for reproducibility.
"""

from __future__ import annotations

import configparser
import hashlib
import io

DEFAULTS = {
    "density": {
        "sigma_dot": "6.0",
        "sigma_region": "2.0",
        "sigma_detection": "2.0",
    },
    "slic": {
        "compactness": "10.0",
        "iters": "10",
        "level": "small",
    },
    "thermal": {
        "base_f": "50.0",
        "scale": "2000.0",
    },
    "train": {
        "arch": "tuned",
        "width_scale": "1.0",
        "epochs": "15",
        "lr": "0.003",
        "lr_decay": "1.0",
        "batch_size": "8",
        "momentum": "0.9",
        "seed": "0",
        "augment": "false",
        "target_scale": "100.0",
    },
    "predict": {
        "tta": "median",
    },
    "segment": {
        "alpha": "0.4",
        "gamma": "10.0",
        "delta": "46775.0",
        "beta": "1.0",
    },
    "eval": {
        "alpha_grid": "0.30,0.35,0.40,0.45,0.50,0.55,0.60",
        "beta_grid": "0.6,0.8,1.0,1.2,1.4",
        "iou_threshold": "0.5",
        "cv_groups": "",
    },
    "synth": {
        "width": "128",
        "height": "128",
        "min_blobs": "5",
        "max_blobs": "20",
        "min_radius": "4.0",
        "max_radius": "9.0",
        "max_overlap": "0.3",
        "n_segments": "8",
    },
    "serve": {
        "port": "8008",
        "default_alpha": "0.4",
    },
}


def default_config() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path=None) -> configparser.ConfigParser:
    """Defaults overlaid with the file's sections, if a path is given."""
    cp = default_config()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    return cp


def config_hash(cp: configparser.ConfigParser) -> str:
    """SHA-256 of the canonical (sorted) serialization."""
    buf = io.StringIO()
    for section in sorted(cp.sections()):
        buf.write(f"[{section}]\n")
        for key in sorted(cp[section]):
            buf.write(f"{key}={cp[section][key]}\n")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def float_list(raw: str) -> tuple:
    return tuple(float(tok) for tok in raw.split(",") if tok.strip())
