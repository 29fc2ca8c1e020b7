"""sasenet: spatially-adaptive squeeze-excitation attention blocks, the
networks they plug into, analytic cost accounting, and a verification harness.
"""

from .tensor import (NumericError, ShapeError, Tensor, as_tensor, backward,
                     concat, flop_counter, full, matmul, no_grad, randn,
                     reduce, reset_tape, softmax, split, zeros)
from .nn import Module
from .attention import (MHSA, MHSAConfig, SASERecogConfig, SASERecognition,
                        SASESynthConfig, SASESynthesis, SEConfig, SLEConfig,
                        SkipLayerExcite, SqueezeExcite)
from .arch import (BlockSpec, NetSpec, build_bottleneck, build_generator,
                   build_resnet, generator_spec, resnet50_spec)
from .analysis import (CostReport, ScalingCurve, count_flops, count_params,
                       gradcheck, scaling_bench)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
