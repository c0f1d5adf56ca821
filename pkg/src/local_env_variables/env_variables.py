import multiprocessing
import os
from pathlib import Path

import dotenv
from attrs import frozen

dotenv_path = os.path.join(os.path.dirname(__file__), '.env')
dotenv.load_dotenv(dotenv_path)

# every variable has a fallback so the package works without a .env file
NTK_OUTPUT_DIR = os.environ.get('NTK_OUTPUT_DIR', './ntk_experiments_output')
NTK_N_WORKERS = int(
    os.environ.get('NTK_N_WORKERS', max(multiprocessing.cpu_count() - 2, 1))
)
NTK_LOG_LEVEL = os.environ.get('NTK_LOG_LEVEL', 'INFO')
NTK_ROOT_SEED = int(os.environ.get('NTK_ROOT_SEED', 0))

# ==============================================================================
# // output file layout
# ==============================================================================

@frozen
class experiment_files_object:
    """names of the files written into each command's output folder"""
    config_used: str = "config_used.yaml"
    run_info: str = "run_info.json"
    failures_dir: str = "failures"
    edr_table: str = "edr_table.csv"
    spectrum_template: str = "spectrum_{cell}.csv"
    mode_spectrum: str = "mode_spectrum.csv"
    risk_curve: str = "risk_curve.csv"
    train_trace: str = "train_trace.csv"
    checkpoint: str = "network_checkpoint.npz"
    gap_vs_width: str = "gap_vs_width.csv"
    gap_vs_width_by_seed: str = "gap_vs_width_by_seed.csv"
    cv_risks: str = "cv_risks.csv"
    cv_selection: str = "cv_selection.json"
    plot_template: str = "plot_{name}.csv"

experiment_files = experiment_files_object()


def output_folder(command: str, root: str | Path | None = None) -> Path:
    """default output folder of a subcommand: `<root>/<command>`"""
    if root is None:
        root = NTK_OUTPUT_DIR
    return Path(root) / command
