"""Experiment plumbing: configs, synthetic scenes, training loops, metrics,
image I/O, and the command-line interface."""

from .config import Config, parse_config, load_config, format_config  # noqa: F401
from .images import read_image, write_image  # noqa: F401
from .metrics import psnr, MetricsLog  # noqa: F401
from .scenes import make_scene  # noqa: F401
