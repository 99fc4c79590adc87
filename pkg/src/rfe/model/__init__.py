from .continual import ClassifierHeads, ContinualModel, ModelConfig, classify, extract
from .extractors import AuxiliaryExtractor, ConvExtractor, MLPExtractor, build_extractor
from .nn import Conv2d, Linear, Module
from .retrospector import (
    RETROSPECTOR_KINDS,
    MLPRetrospector,
    Retrospector,
    aux_parameter_count,
    build_variant_retrospector,
    retrospector_parameter_count,
)


def aux_forward(retrospector: Retrospector, x):
    return retrospector.aux(x)


def joint_encode(retrospector: Retrospector, f_x, h_x):
    return retrospector.joint_encode(f_x, h_x)


def rectify(retrospector: Retrospector, f_x, x=None, h_x=None):
    return retrospector.rectify(f_x, x, h_x=h_x)


__all__ = [
    "AuxiliaryExtractor", "ClassifierHeads", "ContinualModel", "Conv2d", "ConvExtractor", "Linear",
    "MLPExtractor", "MLPRetrospector", "Module", "ModelConfig", "RETROSPECTOR_KINDS", "Retrospector",
    "aux_forward", "aux_parameter_count", "build_extractor", "build_variant_retrospector", "classify",
    "extract", "joint_encode", "rectify", "retrospector_parameter_count",
]
