"""Blurry video frame interpolation: time-conditioned deformable interpolation,
bidirectional recurrent fusion and Taylor-unfolded transformer deblurring."""
from .birdam import BiRDAM, RDAU
from .data import BlurSpec, make_toy_dataset, synthesize_blur
from .deblur import TaylorConfig, TaylorDeblur, TransformerConfig
from .deform import DeformConfig, deform_conv2d, flow_warp
from .metrics import EvalReport, psnr, ssim
from .pipeline import BVFINet, FrameSequence, ModelConfig, interpolate_video
from .tpcd import TPCD
from .training import Checkpoint, TrainConfig, train

__version__ = "0.1.0"
