"""Few-sample model compression toolkit.

Prune a trained convolutional network (structured channel schemes or
unstructured magnitude masks), train the pruned backbone to mimic the
teacher's features around the final pooling layer on a handful of unlabeled
images, then graft the teacher's classifier head back on.  Everything runs
on a self-contained numpy autodiff engine.
"""

__version__ = "0.1.0"

from .estimator import FewSampleCompressor
from .graph import LayerGraph
from .mimic import MimicConfig, train_mimic, replace_head
from .pruning import make_plan, apply_plan, resolve_channel_groups
from .zoo import build_model, build_resnet, build_mobilenetv2

__all__ = [
    "FewSampleCompressor", "LayerGraph", "MimicConfig", "train_mimic",
    "replace_head", "make_plan", "apply_plan", "resolve_channel_groups",
    "build_model", "build_resnet", "build_mobilenetv2", "__version__",
]
