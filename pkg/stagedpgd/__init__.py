"""stagedpgd - Staged two-model PGD attacks on a toy vision-language testbed."""

__version__ = "0.1.0"
__license__ = "MIT"
