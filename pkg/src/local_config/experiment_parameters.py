import copy
from typing import Literal, Optional

from attrs import define, field, validators

import local_env_variables.env_variables as env
from local_ntk_spectra.spectral_estimator import DISTRIBUTIONS
from local_ntk_spectra.sphere_harmonics import QUADRATURE_RULES

SPHERE_PROFILES = ["ntk", "constant", "kappa0", "kappa1"]


def _int_tuple(value) -> tuple[int, ...]:
    return tuple(int(v) for v in value)


def _float_tuple(value) -> tuple[float, ...]:
    return tuple(float(v) for v in value)


def _str_tuple(value) -> tuple[str, ...]:
    if isinstance(value, str):
        return (value,)
    return tuple(str(v) for v in value)


def _optional_float(value) -> Optional[float]:
    return None if value is None else float(value)


def _check_window(instance, attribute, value):
    if len(value) != 2 or not 1 <= value[0] < value[1]:
        raise ValueError(f"{attribute.name} must be (lo, hi) with 1 <= lo < hi, got {value}")


def _check_distributions(instance, attribute, value):
    unknown = [v for v in value if v not in DISTRIBUTIONS]
    if unknown:
        raise ValueError(f"unknown distribution {unknown}. Expected one of: {list(DISTRIBUTIONS)}")


def _check_positive_entries(instance, attribute, value):
    if len(value) == 0 or min(value) <= 0:
        raise ValueError(f"{attribute.name} must be a non-empty list of positive values, got {value}")


@define
class EdrConf:
    """eigenvalue decay rate grid

    Attributes:
    `distributions`: tuple[str, ...]
        sampling distributions, any of "ucube", "ucube01", "triangular", "clipped_normal".
        Default: all four
    `dims`: tuple[int, ...]
        input dimensions d. Default: (3, 4, 5)
    `layers`: tuple[int, ...]
        hidden layer counts L. Default: (2, 3, 4)
    `n`: int
        sample size per repetition. Default: 1000
    `window`: tuple[int, int]
        1-based index window (i_lo, i_hi) of the log-log fit. Default: (50, 200)
    `n_seeds`: int
        repetitions averaged per cell. Default: 3
    """
    distributions: tuple[str, ...] = field(
        default=tuple(DISTRIBUTIONS), converter=_str_tuple, validator=_check_distributions
    )
    dims: tuple[int, ...] = field(default=(3, 4, 5), converter=_int_tuple, validator=_check_positive_entries)
    layers: tuple[int, ...] = field(default=(2, 3, 4), converter=_int_tuple, validator=_check_positive_entries)
    n: int = field(default=1000, converter=int, validator=validators.ge(2))
    window: tuple[int, ...] = field(default=(50, 200), converter=_int_tuple, validator=_check_window)
    n_seeds: int = field(default=3, converter=int, validator=validators.ge(1))


@define
class SphereModesConf:
    """Funk–Hecke modes of a dot-product kernel on S^d

    Attributes:
    `profile`: Literal["ntk", "constant", "kappa0", "kappa1"]
        `ntk`: the homogeneous NTK profile with L hidden layers. Default: "ntk"
    `d`: int. Default: 3
    `L`: int. Default: 2
    `n_max`: int
        largest degree, at most 200. Default: 100
    `quad_order`: int
        nodes of the first quadrature pass (the check doubles it). Default: 512
    `rule`: Literal["gauss_jacobi", "angular"]. Default: "angular"
    `window`: tuple[int, int]
        degree window of the slope fit. Default: (10, 60)
    """
    profile: Literal["ntk", "constant", "kappa0", "kappa1"] = field(
        default="ntk", validator=validators.in_(SPHERE_PROFILES)
    )
    d: int = field(default=3, converter=int, validator=validators.ge(1))
    L: int = field(default=2, converter=int, validator=validators.ge(1))
    n_max: int = field(default=100, converter=int, validator=validators.ge(0))
    quad_order: int = field(default=512, converter=int, validator=validators.ge(1))
    rule: str = field(default="angular", validator=validators.in_(QUADRATURE_RULES))
    window: tuple[int, ...] = field(default=(10, 60), converter=_int_tuple, validator=_check_window)


@define
class FlowConf:
    """kernel gradient flow on a synthetic regression task

    Attributes:
    `d`: int. Default: 1
    `L`: int. Default: 2
    `distribution`: str. Default: "ucube"
    `n`: int
        training sample size. Default: 100
    `n_holdout`: int. Default: 200
    `noise_sigma`: float. Default: 0.3
    `s`: float
        smoothness of the target, > 1/(d+1). Default: 1.0
    `c`: float
        constant of t_op = c n^{(d+1)/(s(d+1)+d)}. Default: 1.0
    `times`: tuple[float, ...]
        times of the risk curve; t_op is added. Default: 10^-1 ... 10^8
    `n_centers`: int
        centers of the synthetic target. Default: 40
    `n_mc`: int
        Monte Carlo points of the L2 risk. Default: 2000
    """
    d: int = field(default=1, converter=int, validator=validators.ge(1))
    L: int = field(default=2, converter=int, validator=validators.ge(1))
    distribution: str = field(default="ucube", validator=validators.in_(list(DISTRIBUTIONS)))
    n: int = field(default=100, converter=int, validator=validators.ge(1))
    n_holdout: int = field(default=200, converter=int, validator=validators.ge(1))
    noise_sigma: float = field(default=0.3, converter=float, validator=validators.ge(0))
    s: float = field(default=1.0, converter=float, validator=validators.gt(0))
    c: float = field(default=1.0, converter=float, validator=validators.gt(0))
    times: tuple[float, ...] = field(
        default=(0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8),
        converter=_float_tuple,
        validator=_check_positive_entries,
    )
    n_centers: int = field(default=40, converter=int, validator=validators.ge(1))
    n_mc: int = field(default=2000, converter=int, validator=validators.ge(1))


@define
class TrainConf:
    """gradient descent training of one mirrored network

    Attributes:
    `d`: int. Default: 2
    `L`: int. Default: 2
    `width`: int
        width of every hidden layer. Default: 512
    `n`: int
        training points. Default: 5
    `noise_sigma`: float. Default: 0.0
    `step_size`: Optional[float]
        None uses n/(2 λ_max(K_0(X, X))). Default: None
    `n_steps`: int. Default: 500
    `log_every`: int. Default: 10
    """
    d: int = field(default=2, converter=int, validator=validators.ge(1))
    L: int = field(default=2, converter=int, validator=validators.ge(1))
    width: int = field(default=512, converter=int, validator=validators.ge(1))
    n: int = field(default=5, converter=int, validator=validators.ge(1))
    noise_sigma: float = field(default=0.0, converter=float, validator=validators.ge(0))
    step_size: Optional[float] = field(
        default=None, converter=_optional_float, validator=validators.optional(validators.gt(0))
    )
    n_steps: int = field(default=500, converter=int, validator=validators.ge(0))
    log_every: int = field(default=10, converter=int, validator=validators.ge(1))


@define
class CompareConf:
    """network vs NTK flow across widths

    Attributes:
    `widths`: tuple[int, ...]. Default: (256, 1024, 4096)
    `n_seeds`: int. Default: 5
    `d`: int. Default: 2
    `L`: int. Default: 2
    `n`: int. Default: 5
    `noise_sigma`: float. Default: 0.0
    `n_steps`: int. Default: 500
    `step_fraction`: float
        step size as a fraction of n/λ_max(K^NT(X, X)), shared by all widths. Default: 0.1
    `log_every`: int. Default: 25
    """
    widths: tuple[int, ...] = field(
        default=(256, 1024, 4096), converter=_int_tuple, validator=_check_positive_entries
    )
    n_seeds: int = field(default=5, converter=int, validator=validators.ge(1))
    d: int = field(default=2, converter=int, validator=validators.ge(1))
    L: int = field(default=2, converter=int, validator=validators.ge(1))
    n: int = field(default=5, converter=int, validator=validators.ge(1))
    noise_sigma: float = field(default=0.0, converter=float, validator=validators.ge(0))
    n_steps: int = field(default=500, converter=int, validator=validators.ge(1))
    step_fraction: float = field(default=0.1, converter=float, validator=validators.gt(0))
    log_every: int = field(default=25, converter=int, validator=validators.ge(1))


@define
class CvConf:
    """cross-validated stopping time

    Attributes:
    `d`: int. Default: 1
    `L`: int. Default: 2
    `distribution`: str. Default: "ucube"
    `n`: int
        training sample size. Default: 200
    `n_holdout`: int. Default: 200
    `noise_sigma`: float. Default: 0.3
    `Q`: float
        ratio of the candidate grid {1, Q, ..., Q^k}. Default: 2.0
    `M`: Optional[float]
        truncation level; None uses the largest |y| of the training and holdout sets. Default: None
    `delta`: float
        confidence of the reported oracle bound. Default: 0.1
    `n_centers`: int. Default: 40
    `n_mc`: int. Default: 4000
    """
    d: int = field(default=1, converter=int, validator=validators.ge(1))
    L: int = field(default=2, converter=int, validator=validators.ge(1))
    distribution: str = field(default="ucube", validator=validators.in_(list(DISTRIBUTIONS)))
    n: int = field(default=200, converter=int, validator=validators.ge(1))
    n_holdout: int = field(default=200, converter=int, validator=validators.ge(1))
    noise_sigma: float = field(default=0.3, converter=float, validator=validators.ge(0))
    Q: float = field(default=2.0, converter=float, validator=validators.gt(1))
    M: Optional[float] = field(default=None, converter=_optional_float, validator=validators.optional(validators.gt(0)))
    delta: float = field(default=0.1, converter=float, validator=[validators.gt(0), validators.lt(1)])
    n_centers: int = field(default=40, converter=int, validator=validators.ge(1))
    n_mc: int = field(default=4000, converter=int, validator=validators.ge(1))


@define
class ExperimentParams:
    seed: int = field(default=env.NTK_ROOT_SEED, converter=int)
    output_dir: str = field(default=env.NTK_OUTPUT_DIR, converter=str)
    n_workers: int = field(default=env.NTK_N_WORKERS, converter=int, validator=validators.ge(1))
    log_level: str = field(default=env.NTK_LOG_LEVEL, converter=str)
    plot_data: bool = field(default=False, converter=bool)
    edr: EdrConf = field(factory=EdrConf)
    sphere_modes: SphereModesConf = field(factory=SphereModesConf)
    flow: FlowConf = field(factory=FlowConf)
    train: TrainConf = field(factory=TrainConf)
    compare: CompareConf = field(factory=CompareConf)
    cv: CvConf = field(factory=CvConf)

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        return cls(
            edr=EdrConf(**(d.pop("edr", None) or {})),
            sphere_modes=SphereModesConf(**(d.pop("sphere_modes", None) or {})),
            flow=FlowConf(**(d.pop("flow", None) or {})),
            train=TrainConf(**(d.pop("train", None) or {})),
            compare=CompareConf(**(d.pop("compare", None) or {})),
            cv=CvConf(**(d.pop("cv", None) or {})),
            **d,
        )
