"""
Latent matching model training

Learns the mapping pair (Lx, Ly) by minimizing

    F = -sum_{u,v} c_uv l_xu^T l_yv
        - (alpha/2) <Rx, Lx^T Lx> - (beta/2) <Ry, Ly^T Ly>
        + (theta2/2) ||Lx^T Ly||_F^2 + (lambda2/2) ||Lx||_F^2 + (rho2/2) ||Ly||_F^2

with either coordinate descent (closed-form column updates through one
Cholesky factorization per block and multi right-hand-side solves) or
gradient descent. The knowledge terms carry a factor 1/2 so that the
update formulas, which use alpha and beta directly, are the exact gradient
of F.
"""

import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .corpus import CrossCovariance
from .exceptions import ConfigError, DataError, DivergenceError, NumericalError
from .knowledge import KnowledgeMatrix
from .logger import TrainingLogger
from .parallel import fixed_blocks, ordered_map, worker_pool

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"LMM1"
MODEL_VERSION = 1

L1_KEYS = ("theta1", "lambda1", "rho1")


class Method(Enum):
    COORDINATE = "coordinate"
    GRADIENT = "gradient"


class Sweep(Enum):
    JACOBI = "jacobi"            # both blocks from the iteration-start snapshot
    GAUSS_SEIDEL = "gauss_seidel"  # Ly sees the freshly updated Lx


_METHOD_ALIASES = {"cd": "coordinate", "gd": "gradient"}


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run"""
    d: int = 100
    theta2: float = 0.01
    lambda2: float = 0.1
    rho2: float = 0.1
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.01
    max_iters: int = 100
    tol: float = 1e-5
    seed: int = 0
    method: Method = Method.COORDINATE
    sweep: Sweep = Sweep.GAUSS_SEIDEL
    workers: int = 1
    block_size: int = 512
    divergence_limit: float = 1e12

    def __post_init__(self):
        if isinstance(self.method, str):
            name = _METHOD_ALIASES.get(self.method, self.method)
            try:
                self.method = Method(name)
            except ValueError:
                raise ConfigError(f"Unknown method {self.method!r} (coordinate|gradient)")
        if isinstance(self.sweep, str):
            try:
                self.sweep = Sweep(self.sweep.replace('-', '_'))
            except ValueError:
                raise ConfigError(f"Unknown sweep {self.sweep!r} (jacobi|gauss_seidel)")

    def validate(self) -> "TrainConfig":
        if self.d < 1:
            raise ConfigError(f"latent dimension must be >= 1, got {self.d}")
        if self.lambda2 <= 0 or self.rho2 <= 0:
            raise ConfigError("lambda2 and rho2 must be > 0 to keep the solve matrices positive definite")
        if self.theta2 < 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("theta2, alpha and beta must be >= 0")
        if self.gamma <= 0 and self.method is Method.GRADIENT:
            raise ConfigError(f"gradient descent needs gamma > 0, got {self.gamma}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.workers < 1 or self.block_size < 1:
            raise ConfigError("workers and block_size must be >= 1")
        return self

    @classmethod
    def read_values(cls, path: str) -> Dict[str, object]:
        """Parse a key=value file whose keys mirror the field names"""
        if not os.path.exists(path):
            raise ConfigError(f"Training config not found: {path}")
        kinds = {f.name: f.type for f in fields(cls)}
        values: Dict[str, object] = {}
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split('#', 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition('=')
                key, value = key.strip(), value.strip()
                where = f"{path}:{lineno}"
                if not sep:
                    raise ConfigError(f"{where}: expected key=value")
                if key in L1_KEYS:
                    if _coerce(float, value, where) != 0.0:
                        raise ConfigError(f"{where}: l1 penalties are not supported ({key} must be 0)")
                    continue
                if key not in kinds:
                    raise ConfigError(f"{where}: unknown training option {key!r}")
                values[key] = _coerce(kinds[key], value, where)
        return values

    @classmethod
    def from_file(cls, path: str, **overrides) -> "TrainConfig":
        values = cls.read_values(path)
        values.update(overrides)
        return cls(**values)


def _coerce(kind, value: str, where: str):
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r}")
    return value


@dataclass
class MappingPair:
    """Lx (d x d_x) and Ly (d x d_y); column u is the latent vector of term u"""
    Lx: np.ndarray
    Ly: np.ndarray

    def __post_init__(self):
        self.Lx = np.asarray(self.Lx, dtype=np.float64)
        self.Ly = np.asarray(self.Ly, dtype=np.float64)
        if self.Lx.ndim != 2 or self.Ly.ndim != 2 or self.Lx.shape[0] != self.Ly.shape[0]:
            raise DataError(f"mapping shapes {self.Lx.shape} and {self.Ly.shape} disagree")

    @property
    def d(self) -> int:
        return self.Lx.shape[0]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.Lx.shape[1], self.Ly.shape[1]

    def copy(self) -> "MappingPair":
        return MappingPair(self.Lx.copy(), self.Ly.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.Lx)) and np.all(np.isfinite(self.Ly)))


@dataclass
class TrainReport:
    objective_trace: List[float] = field(default_factory=list)
    wall_clock_per_iter: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    initial_objective: float = float('nan')
    method: str = Method.COORDINATE.value


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def init_mappings(config: TrainConfig, dims: Tuple[int, int],
                  warm_start: Optional[MappingPair] = None) -> MappingPair:
    """Uniform [-1/sqrt(d), 1/sqrt(d)] entries from the seeded generator, or a copy of the warm start"""
    if config.d < 1:
        raise ConfigError(f"latent dimension must be >= 1, got {config.d}")
    if warm_start is not None:
        if warm_start.d != config.d or warm_start.dims != tuple(dims):
            raise DataError(f"warm start is {warm_start.d}x{warm_start.dims} but training needs "
                            f"{config.d}x{tuple(dims)}")
        return warm_start.copy()
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / math.sqrt(config.d)
    Lx = rng.uniform(-bound, bound, size=(config.d, dims[0]))
    Ly = rng.uniform(-bound, bound, size=(config.d, dims[1]))
    return MappingPair(Lx, Ly)


def solve_spd_multi_rhs(A: np.ndarray, B: np.ndarray, workers: int = 1,
                        block_size: int = 512) -> np.ndarray:
    """Solve A X = B for symmetric positive definite A

    A is factorized once; column blocks of B are solved against the shared
    factor, in parallel when ``workers`` > 1.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalError("linear system has non-finite entries")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Cholesky factorization failed: {e}") from e

    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    blocks = fixed_blocks(B.shape[1], block_size)

    def solve_block(bounds):
        start, stop = bounds
        return scipy.linalg.cho_solve(factor, B[:, start:stop], check_finite=False)

    X = np.empty_like(B)
    for (start, stop), solution in zip(blocks, ordered_map(solve_block, blocks, workers)):
        X[:, start:stop] = solution
    if not np.all(np.isfinite(X)):
        raise NumericalError("solve produced non-finite values")
    return X[:, 0] if squeeze else X


def _sparse_times_dense_t(S: sp.csr_matrix, L: np.ndarray, workers: int,
                          block_size: int) -> np.ndarray:
    """(S @ L^T)^T = L @ S^T computed in fixed row blocks of S"""
    n = S.shape[0]
    blocks = fixed_blocks(n, block_size)
    Lt = L.T

    def product(bounds):
        start, stop = bounds
        return np.asarray(S[start:stop] @ Lt)

    out = np.empty((L.shape[0], n))
    for (start, stop), part in zip(blocks, ordered_map(product, blocks, workers)):
        out[:, start:stop] = part.T
    return out


def _knowledge(R: Optional[KnowledgeMatrix], coefficient: float) -> Optional[sp.csr_matrix]:
    if R is None or coefficient == 0.0:
        return None
    return R.matrix


def _check_shapes(L: MappingPair, C: CrossCovariance, Rx: Optional[KnowledgeMatrix],
                  Ry: Optional[KnowledgeMatrix]):
    if C.shape != L.dims:
        raise DataError(f"cross-covariance is {C.shape} but mappings are {L.dims}")
    if Rx is not None and Rx.dim != L.dims[0]:
        raise DataError(f"Rx has dimension {Rx.dim}, expected {L.dims[0]}")
    if Ry is not None and Ry.dim != L.dims[1]:
        raise DataError(f"Ry has dimension {Ry.dim}, expected {L.dims[1]}")


def _x_rhs(L: MappingPair, C: CrossCovariance, Rx, config: TrainConfig) -> np.ndarray:
    """B_y^T = Ly C^T + alpha Lx Rx, column u is the right-hand side of l_xu"""
    rhs = _sparse_times_dense_t(C.matrix, L.Ly, config.workers, config.block_size)
    R = _knowledge(Rx, config.alpha)
    if R is not None:
        rhs += config.alpha * _sparse_times_dense_t(R, L.Lx, config.workers, config.block_size)
    return rhs


def _y_rhs(L: MappingPair, C: CrossCovariance, Ry, config: TrainConfig) -> np.ndarray:
    """B_x = Lx C + beta Ly Ry, column v is the right-hand side of l_yv"""
    rhs = _sparse_times_dense_t(C.transposed, L.Lx, config.workers, config.block_size)
    R = _knowledge(Ry, config.beta)
    if R is not None:
        rhs += config.beta * _sparse_times_dense_t(R, L.Ly, config.workers, config.block_size)
    return rhs


def system_matrices(L: MappingPair, config: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(A for the Lx block, A for the Ly block)

    The Lx columns solve (theta2 Ly Ly^T + lambda2 I), the Ly columns
    (theta2 Lx Lx^T + rho2 I); both have smallest eigenvalue >= min(lambda2, rho2).
    """
    eye = np.eye(L.d)
    A_for_x = config.theta2 * (L.Ly @ L.Ly.T) + config.lambda2 * eye
    A_for_y = config.theta2 * (L.Lx @ L.Lx.T) + config.rho2 * eye
    return A_for_x, A_for_y


def objective(L: MappingPair, C: CrossCovariance, Rx: Optional[KnowledgeMatrix] = None,
              Ry: Optional[KnowledgeMatrix] = None, config: Optional[TrainConfig] = None) -> float:
    config = config or TrainConfig()
    _check_shapes(L, C, Rx, Ry)
    Lx, Ly = L.Lx, L.Ly

    # sum_{u,v} c_uv l_xu^T l_yv = <Lx, Ly C^T>
    value = -float(np.sum(Lx * _sparse_times_dense_t(C.matrix, Ly, 1, config.block_size)))
    R = _knowledge(Rx, config.alpha)
    if R is not None:
        value -= 0.5 * config.alpha * float(np.sum(Lx * _sparse_times_dense_t(R, Lx, 1, config.block_size)))
    R = _knowledge(Ry, config.beta)
    if R is not None:
        value -= 0.5 * config.beta * float(np.sum(Ly * _sparse_times_dense_t(R, Ly, 1, config.block_size)))
    if config.theta2:
        # ||Lx^T Ly||_F^2 = <Lx Lx^T, Ly Ly^T>, never forms the d_x x d_y product
        value += 0.5 * config.theta2 * float(np.sum((Lx @ Lx.T) * (Ly @ Ly.T)))
    value += 0.5 * config.lambda2 * float(np.sum(Lx * Lx))
    value += 0.5 * config.rho2 * float(np.sum(Ly * Ly))

    if not math.isfinite(value):
        raise NumericalError("objective is not finite")
    return value


def gradient(L: MappingPair, C: CrossCovariance, Rx: Optional[KnowledgeMatrix],
             Ry: Optional[KnowledgeMatrix], config: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Descent directions (-dF/dLx, -dF/dLy) of the gradient updates"""
    _check_shapes(L, C, Rx, Ry)
    A_for_x, A_for_y = system_matrices(L, config)
    G_x = _x_rhs(L, C, Rx, config) - A_for_x @ L.Lx
    G_y = _y_rhs(L, C, Ry, config) - A_for_y @ L.Ly
    return G_x, G_y


def cd_sweep(L: MappingPair, C: CrossCovariance, Rx: Optional[KnowledgeMatrix],
             Ry: Optional[KnowledgeMatrix], config: TrainConfig) -> MappingPair:
    """One coordinate-descent sweep over all columns of Lx and Ly

    Jacobi: both blocks are computed from the sweep-start mappings.
    Gauss-Seidel: Lx is updated first and the Ly block uses the new Lx.
    """
    _check_shapes(L, C, Rx, Ry)
    A_for_x, A_for_y = system_matrices(L, config)
    new_Lx = solve_spd_multi_rhs(A_for_x, _x_rhs(L, C, Rx, config),
                                 config.workers, config.block_size)

    if config.sweep is Sweep.GAUSS_SEIDEL:
        half = MappingPair(new_Lx, L.Ly)
        _, A_for_y = system_matrices(half, config)
        rhs_y = _y_rhs(half, C, Ry, config)
    else:
        rhs_y = _y_rhs(L, C, Ry, config)
    new_Ly = solve_spd_multi_rhs(A_for_y, rhs_y, config.workers, config.block_size)
    return MappingPair(new_Lx, new_Ly)


def gd_step(L: MappingPair, C: CrossCovariance, Rx: Optional[KnowledgeMatrix],
            Ry: Optional[KnowledgeMatrix], config: TrainConfig) -> MappingPair:
    """Simultaneous gradient update of every column from the step-start snapshot"""
    G_x, G_y = gradient(L, C, Rx, Ry, config)
    updated = MappingPair(L.Lx + config.gamma * G_x, L.Ly + config.gamma * G_y)
    if not updated.is_finite():
        raise DivergenceError(f"gradient descent diverged (non-finite mappings); lower gamma "
                              f"(currently {config.gamma})")
    try:
        value = objective(updated, C, Rx, Ry, config)
    except NumericalError:
        value = math.inf
    if abs(value) > config.divergence_limit:
        raise DivergenceError(f"gradient descent diverged (objective {value:.3e}); lower gamma "
                              f"(currently {config.gamma})")
    return updated


def train(C: CrossCovariance, Rx: Optional[KnowledgeMatrix] = None,
          Ry: Optional[KnowledgeMatrix] = None, config: Optional[TrainConfig] = None,
          warm_start: Optional[MappingPair] = None) -> Tuple[MappingPair, TrainReport]:
    """Iterate sweeps or gradient steps until the relative objective change drops below tol"""
    config = (config or TrainConfig()).validate()
    dims = C.shape
    L = init_mappings(config, dims, warm_start)
    _check_shapes(L, C, Rx, Ry)

    progress = TrainingLogger()
    progress.log_start(config.method.value, config.d, dims, config.workers, warm_start is not None)
    step = cd_sweep if config.method is Method.COORDINATE else gd_step

    report = TrainReport(method=config.method.value)
    previous = objective(L, C, Rx, Ry, config)
    report.initial_objective = previous

    with worker_pool(config.workers):
        for iteration in range(1, config.max_iters + 1):
            started = time.perf_counter()
            L = step(L, C, Rx, Ry, config)
            if not L.is_finite():
                raise NumericalError(f"mappings became non-finite at iteration {iteration}")
            current = objective(L, C, Rx, Ry, config)
            elapsed = time.perf_counter() - started

            rel_change = abs(current - previous) / max(abs(previous), 1e-12)
            report.objective_trace.append(current)
            report.wall_clock_per_iter.append(elapsed)
            report.iterations = iteration
            progress.log_iteration(iteration, current, rel_change, elapsed)

            if rel_change < config.tol:
                report.converged = True
                break
            previous = current

    progress.log_finish(report.iterations, report.converged, report.objective_trace[-1])
    return L, report


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_model(path: str, mappings: MappingPair, vocab_path: str):
    """``LMM1`` model: header, Lx and Ly row-major f64, vocabulary path"""
    d = mappings.d
    d_x, d_y = mappings.dims
    encoded = vocab_path.encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack('<I', MODEL_VERSION))
        f.write(struct.pack('<QQQ', d, d_x, d_y))
        f.write(np.ascontiguousarray(mappings.Lx, dtype='<f8').tobytes())
        f.write(np.ascontiguousarray(mappings.Ly, dtype='<f8').tobytes())
        f.write(struct.pack('<Q', len(encoded)))
        f.write(encoded)


def load_model(path: str) -> Tuple[MappingPair, str]:
    """Returns the mappings and the recorded vocabulary path"""
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != MODEL_MAGIC:
        raise DataError(f"not a model file (magic {data[:4]!r})", path=path)
    offset = 4
    try:
        (version,) = struct.unpack_from('<I', data, offset)
        offset += 4
        if version != MODEL_VERSION:
            raise DataError(f"unsupported model version {version}", path=path)
        d, d_x, d_y = struct.unpack_from('<QQQ', data, offset)
        offset += 24
        Lx = np.frombuffer(data, dtype='<f8', count=d * d_x, offset=offset).reshape(d, d_x)
        offset += 8 * d * d_x
        Ly = np.frombuffer(data, dtype='<f8', count=d * d_y, offset=offset).reshape(d, d_y)
        offset += 8 * d * d_y
        (length,) = struct.unpack_from('<Q', data, offset)
        offset += 8
    except (struct.error, ValueError) as e:
        raise DataError(f"truncated model file: {e}", path=path) from e
    if offset + length != len(data):
        raise DataError("model file length does not match its header", path=path)
    vocab_path = data[offset:offset + length].decode('utf-8')
    return MappingPair(Lx.astype(np.float64), Ly.astype(np.float64)), vocab_path


def write_trace(path: str, report: TrainReport, header: Optional[str] = None):
    """``iteration,objective,seconds`` CSV, iteration 0 is the initial objective"""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        if header:
            f.write(f"# {header}\n")
        f.write("iteration,objective,seconds\n")
        f.write(f"0,{report.initial_objective!r},0.0\n")
        for i, (value, seconds) in enumerate(zip(report.objective_trace, report.wall_clock_per_iter), start=1):
            f.write(f"{i},{value!r},{seconds:.6f}\n")
