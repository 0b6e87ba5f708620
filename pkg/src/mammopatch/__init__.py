"""mammopatch: patch-level mammography classification pipeline.

Synthetic patch generation, labeling and stratified splitting, on-the-fly
augmentation, small CNN training on a CPU-only engine, ROC and operating-point
analysis, and a CLI that runs the whole experiment loop.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
