"""U-Net segmentation baseline over the shared subject-bundle format."""

from .bundles import Subject, read_subject, read_subject_dirs, write_mask_bundle
from .losses import cross_entropy, dice_per_class
from .model import UNet, forward_probabilities, predict_mask
from .train import TrainConfig, export_masks, load_checkpoint, save_checkpoint, split_pool, train

__version__ = "0.1.0"
