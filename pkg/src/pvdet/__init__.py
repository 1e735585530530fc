"""Photovoltaic panel surface-defect detection on a minimal numpy
autodiff engine: Ghost convolution, BottleneckCSP blocks and a four-head
grid detector with a tiny-target head, plus training, decoding, NMS and
mAP evaluation."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, no_grad, set_debug_nan_checks
from .gradcheck import finite_diff_check
from .blocks import (ConvBnAct, Focus, GhostConv, GhostConvSpec, Bottleneck,
                     BottleneckCSP, C3, SPP)
from .models import (ModelVariant, build, tiny_variant, count_params,
                     count_modules, count_flops, save_checkpoint,
                     load_checkpoint, default_anchors, calibrate_batchnorm,
                     VARIANT_NAMES)
from .postprocess import Detection, decode, decode_heads, iou, nms
from .loss import ciou, assign_targets, detection_loss, Adam, adam_step
from .data import (AnnotatedImage, CLASS_NAMES, parse_voc_xml, synth_panel,
                   synth_corpus, letterbox, mosaic4, preprocess_crop,
                   adaptive_anchors, save_dataset, load_split)
from .metrics import (Evaluator, average_precision, precision_recall,
                      map_over_classes, match_detections, format_report)
from .train import train_model, predict, evaluate
