from .flops import effective_flops, flops_of, layer_flops
from .graph import MaskError, Tape, backward, forward, node_masks, predict, run
from .params import ModelParams, check_params, init_params
from .reconstruct import EmptyLayerError, reconstruct
from .serialize import CheckpointError, load_model, save_model
from .spec import (
    INPUT,
    PRESETS,
    REDESIGNED_VGG16_WIDTHS,
    VGG16_WIDTHS,
    VGG_SMALL_WIDTHS,
    ConvTopology,
    LayerSpec,
    NetworkSpec,
    SpecError,
    build_small_resnet,
    build_vgg_cifar,
    build_vgg_small,
    preset,
    scale_widths,
)
