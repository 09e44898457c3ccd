"""
Logging configuration for latentmatch
"""

import logging
import logging.handlers
import os
from typing import Optional

import psutil


def setup_logging(debug: bool = False, log_dir: Optional[str] = None,
                  max_bytes: int = 10 * 1024 * 1024, backup_count: int = 5):
    """Setup logging configuration"""

    # Configure root logger
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if debug else logging.INFO)

    # Clear existing handlers
    root_logger.handlers.clear()

    # Create formatters
    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # Console handler (standard error)
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG if debug else logging.INFO)
    console_handler.setFormatter(simple_formatter)
    root_logger.addHandler(console_handler)

    # Training trace has its own handlers
    training_logger = logging.getLogger('training')
    training_logger.handlers.clear()
    training_logger.setLevel(logging.DEBUG if debug else logging.INFO)
    training_logger.propagate = False  # Don't propagate to root logger

    training_console = logging.StreamHandler()
    training_console.setLevel(logging.DEBUG if debug else logging.INFO)
    training_console.setFormatter(simple_formatter)
    training_logger.addHandler(training_console)

    if not log_dir:
        return

    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    # File handler for general logs
    file_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, 'latentmatch.log'),
        maxBytes=max_bytes,
        backupCount=backup_count
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(detailed_formatter)
    root_logger.addHandler(file_handler)

    # Per-iteration training trace gets its own file
    training_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, 'training.log'),
        maxBytes=max_bytes // 2,
        backupCount=3
    )
    training_handler.setLevel(logging.DEBUG)
    training_handler.setFormatter(detailed_formatter)
    training_logger.addHandler(training_handler)


def resident_memory_bytes() -> int:
    """Resident set size of the current process"""
    return psutil.Process().memory_info().rss


class TrainingLogger:
    """Specialized logger for optimisation progress"""

    def __init__(self):
        self.logger = logging.getLogger('training')

    def log_start(self, method: str, d: int, dims, workers: int, warm_start: bool):
        self.logger.info("=" * 50)
        self.logger.info(
            f"Training {method} model: d={d}, d_x={dims[0]}, d_y={dims[1]}, "
            f"workers={workers}, warm_start={warm_start}"
        )
        self.logger.info("=" * 50)

    def log_iteration(self, iteration: int, objective: float, rel_change: float, seconds: float):
        """Log one sweep or gradient step"""
        self.logger.info(
            f"iter {iteration:4d}  objective={objective:.10g}  "
            f"rel_change={rel_change:.3e}  time={seconds:.3f}s"
        )

    def log_finish(self, iterations: int, converged: bool, objective: float):
        status = "converged" if converged else "stopped at iteration limit"
        self.logger.info(
            f"Training {status} after {iterations} iterations "
            f"(objective={objective:.10g}, rss={resident_memory_bytes() / 2**20:.1f} MiB)"
        )
