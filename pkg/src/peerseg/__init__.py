"""peerseg: peer-network segmentation training robust to corrupted masks and domain shift."""

__version__ = "0.1.0"
