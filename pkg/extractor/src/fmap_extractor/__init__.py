"""Dense patch-feature extraction and dataset manifests for the matcher."""

from .backbone import StubBackbone, load_backbone
from .extract import extract_to_file
from .fmapio import write_feature_file

__version__ = "0.1.0"

__all__ = ["StubBackbone", "extract_to_file", "load_backbone", "write_feature_file"]
