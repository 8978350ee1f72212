"""2D and 3D (time / vertical) CNNs for daily basin precipitation from multi-level atmospheric fields."""
from .channelizer import LEVEL_PRESETS, TimeSelector, channelize, make_windows, num_channels
from .dataio import AtmosDataset, SplitSpec, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .metrics import EvalReport, evaluate, nse, percentile, render_comparison, rmse, rmse99
from .network import Network, NetworkConfig, Variant, build, infer_shapes, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit, multi_restart_fit

__version__ = "0.1.0"
