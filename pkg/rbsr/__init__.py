from .imageio import read_image, write_image, RawImage
from .resample import resize, downsample_bicubic_x4, upsample_bicubic_x4, ResampleSpec
from .degrade import BlurKernel, DegradationParams, make_gaussian_kernel
from .kernel_estim import estimate_kernel, estimate_patchwise, EstimationConfig
from .models import ModelGraph, build_lookalike_generator, build_sr_generator, build_discriminator, build_e2e_baseline
from .losses import LossWeights, FeatureExtractor
from .trainer import TrainSchedule, train_sr, train_lookalike, train_e2e_baseline
from .metrics import psnr, ssim, SsimConfig
from .pipeline import PipelineBundle, infer, compare_methods
from .run_config import parse_config, RunConfig
from .utils import RbsrException
from . import config, nn, imageio, resample, degrade, kernel_estim, models, losses, trainer, metrics, pipeline
from . import run_config, corpus, selftest, utils
