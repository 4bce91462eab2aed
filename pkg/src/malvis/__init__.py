"""malvis: byte-image malware classification testbed.

Binaries become grayscale byte images; a small CNN classifies families;
packer/morphing emulation attacks it; transform-based augmentation hardens
it; occlusion, HiResCAM and kernel SHAP explain it.
"""

__version__ = "0.1.0"
