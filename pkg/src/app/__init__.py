from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, resolve_config
from .dataset import FrameDataset, load_dataset, write_dataset
from .dynamics import Family, integrate
from .initializer import initialize_scene
from .metrics import MetricsReport, evaluate
from .renderer import PixelGrid, render_frame, render_frames, render_pixel
from .scene import SceneModel, build_scene
from .synthgen import Scenario, default_scenario, generate
from .training import FitResult, Trainer, fit
from .errors import (
    PhysParamError,
    ConfigurationError,
    FamilyMismatchError,
    ScenarioError,
    DatasetError,
    ImageNotFoundError,
    InvalidImageError,
    CheckpointError,
    InitializationError,
    NumericalError,
    NonFiniteError,
    IntegrationError,
    SpringSingularityError,
    HomographyError,
    AutodiffError,
    ShapeMismatchError,
    DomainError,
    TapeError,
)
