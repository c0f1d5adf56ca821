import json
import zlib
from pathlib import Path

import numpy as np
import pandas as pd
import yaml


# ==============================================================================
# // random streams
# ==============================================================================

def purpose_code(tag: str) -> int:
    """stable integer code of a purpose tag (crc32, identical across runs and platforms)"""
    return zlib.crc32(tag.encode("utf-8"))


def substream(root_seed: int, *keys: int | str) -> np.random.Generator:
    """independent generator for the job identified by ``keys``

    e.g. ``substream(seed, cell_index, "sample")``. String keys are replaced by
    their purpose code, so new cells or purposes never perturb existing streams.

    Parameters
    ----------
    root_seed : int
        the single root seed of an experiment
    keys : int | str
        cell index / repetition index / purpose tag, in any combination

    Returns
    -------
    np.random.Generator
    """
    spawn_key = tuple(purpose_code(k) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=spawn_key))


# ==============================================================================
# // writing results
# ==============================================================================

def save_info_json(output_dict: dict, output_file: str | Path):
    Path(output_file).parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, 'w') as f:
        json.dump(output_dict, f, indent=4)


def save_config_yaml(config_dict: dict, output_file: str | Path):
    Path(output_file).parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, 'w') as f:
        yaml.safe_dump(config_dict, f, sort_keys=False)


def write_csv(df: pd.DataFrame, output_file: str | Path, header_lines: list[str] | None = None) -> Path:
    """write a table with ``index=False``. ``header_lines`` are written first,
    each prefixed with ``#`` (read back with ``pd.read_csv(..., comment='#')``)
    """
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, 'w', newline='') as f:
        if header_lines is not None:
            for line in header_lines:
                f.write(f"# {line}\n")
        df.to_csv(f, index=False)
    return output_file


def write_plot_data(x, y, output_file: str | Path, x_name: str = "x", y_name: str = "y") -> Path:
    """(x, y) pairs for external plotting, rows with non-finite values dropped"""
    df = pd.DataFrame({x_name: np.asarray(x, dtype=float), y_name: np.asarray(y, dtype=float)})
    df = df[np.isfinite(df[x_name]) & np.isfinite(df[y_name])]
    return write_csv(df, output_file)


def header_from_meta(meta: dict) -> list[str]:
    return [", ".join(f"{k}={v}" for k, v in meta.items())]


def meta_from_header(header_line: str) -> dict:
    """inverse of `header_from_meta` (values are returned as strings)"""
    header_line = header_line.lstrip("#").strip()
    meta = {}
    for item in header_line.split(","):
        k, v = item.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def derived_seed(root_seed: int, *keys: int | str) -> int:
    """integer seed for objects that record their own seed (e.g. network checkpoints)"""
    spawn_key = tuple(purpose_code(k) if isinstance(k, str) else int(k) for k in keys)
    return int(np.random.SeedSequence(int(root_seed), spawn_key=spawn_key).generate_state(1)[0])
