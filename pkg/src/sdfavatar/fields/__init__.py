from .params import ParamBinding, collect_named_arrays
from .body import BodyFieldConfig, NodeSet, BodyFieldParams, BodyField, build_node_set
from .hand import HandFieldConfig, HandParams, HandField
from .face import FaceFieldConfig, FaceParams, FaceField
from .compose import Avatar, AvatarSnapshot, ToneMapParams, compose_sdf, compose_color

__all__ = [
    "ParamBinding",
    "collect_named_arrays",
    "BodyFieldConfig",
    "NodeSet",
    "BodyFieldParams",
    "BodyField",
    "build_node_set",
    "HandFieldConfig",
    "HandParams",
    "HandField",
    "FaceFieldConfig",
    "FaceParams",
    "FaceField",
    "Avatar",
    "AvatarSnapshot",
    "ToneMapParams",
    "compose_sdf",
    "compose_color",
]
