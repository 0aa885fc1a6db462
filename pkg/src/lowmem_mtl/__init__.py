"""Memory-bounded multi-task learning on diversely annotated data.

A shared trunk feeds per-task heads; backpropagation can be checkpointed so
activation memory does not grow with the number of tasks, and asynchronous
SGD updates each task only once it has seen enough annotated samples.
"""

from pathlib import Path

__version__ = "0.1.0"

CONFIG_DIR = Path(__file__).parent / "configs"
