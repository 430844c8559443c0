"""Long-tailed class-incremental learning with feature distillation,
CAM-guided CutMix exemplar augmentation and balanced softmax."""

__version__ = "0.1.0"
