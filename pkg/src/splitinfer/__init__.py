"""Split client/server inference toolkit.

A lightweight boosted-tree classifier runs on the client, a fusion
ensemble of classifier oracles answers on the server, and a trainable
decision unit routes each sample to one side or the other.
"""

__version__ = "0.1.0"

from .core import (
    Dataset,
    PosteriorVector,
    Sample,
    SplitSpec,
    argmax_class,
    load_dataset_csv,
    save_dataset_csv,
    split_dataset,
)

__all__ = [
    "Dataset",
    "PosteriorVector",
    "Sample",
    "SplitSpec",
    "argmax_class",
    "load_dataset_csv",
    "save_dataset_csv",
    "split_dataset",
    "__version__",
]
