"""Squeeze-enhanced axial attention, mobile backbones, and distillation losses.

A small numpy-backed tensor core with opt-in reverse-mode differentiation and
exact MAC accounting underpins the attention mechanism, the T/S/B/L backbone
family, the multi-resolution distillation losses, and the benchmark harness
that verifies complexity slopes and gradient correctness.
"""

from .analysis import (CostReport, CostRow, GradCheckReport, count_macs,
                       fit_scaling, gradcheck, numerical_gradient, time_kernel)
from .attention import (AttentionConfig, SeaAttentionParams, attention_probe,
                        axial_attend, baseline_attention, build_baseline_params,
                        build_sea_layer_params, build_sea_params, default_config,
                        detail_enhancement, expand_axis, sea_attention_forward,
                        seaformer_layer, squeeze_axis)
from .backbone import (VARIANTS, VariantSpec, build_variant, cls_forward,
                       context_branch_forward, fusion_block, mac_breakdown,
                       parameter_breakdown, seg_forward, stem_forward)
from .distill import (DistillLossReport, cross_entropy_loss, distill_step,
                      feature_similarity_loss, output_similarity_loss,
                      upsample_module)
from .nn import (BatchNormParams, Conv2dParams, MobileNetBlockSpec, avg_pool2d,
                 batchnorm_infer, bilinear_resize, conv2d, mobilenet_block,
                 named_tensors)
from .serialize import FormatError, load_bundle, load_stn, save_bundle, save_stn
from .tensor import (ConfigurationError, DimensionError, MacCounter, Tape,
                     Tensor, backward, matmul, permute, relu6, sigmoid, softmax)

__version__ = "0.1.0"
