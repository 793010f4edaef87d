"""Open-set diagnosis: synthetic knowledge base, case simulator, open-set MLPs,
site ensembles and OSCR metrics."""
from ._kernels import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
