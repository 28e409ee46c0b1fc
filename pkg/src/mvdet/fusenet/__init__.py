from .codec import decode_box, decode_corners, encode_corners
from .layers import Conv2d, Linear, conv2d, roi_pool, upsample_bilinear
from .network import FusionConfig, FusionNet, drop_path_sample, full_mask, global_mask
from .roi import EmptyROIError, RoiRect, roi_project
from .tensor import Tensor, cross_entropy, smooth_l1
from .train import (RoiBatch, SGDParams, TrainingDiverged, ToyDataConfig, build_roi_batch, final_nms,
                    infer, multitask_loss, train_toy)
