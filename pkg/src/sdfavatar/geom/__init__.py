from .encoding import positional_encoding
from .mesh import TriMesh
from .camera import Camera, generate_rays
from .skinning import Joint, Skeleton, Pose, lbs_pose
from .sampling import farthest_point_sample
from .meshdist import MeshDistanceField
from .template import (
    TemplateConfig,
    SkinnedTemplate,
    Expression,
    FaceTemplate,
    build_body_template,
    build_hand_template,
    build_face_template,
    PART_BODY,
    PART_LEFT_HAND,
    PART_RIGHT_HAND,
    PART_FACE,
)

__all__ = [
    "positional_encoding",
    "TriMesh",
    "Camera",
    "generate_rays",
    "Joint",
    "Skeleton",
    "Pose",
    "lbs_pose",
    "farthest_point_sample",
    "MeshDistanceField",
    "TemplateConfig",
    "SkinnedTemplate",
    "Expression",
    "FaceTemplate",
    "build_body_template",
    "build_hand_template",
    "build_face_template",
    "PART_BODY",
    "PART_LEFT_HAND",
    "PART_RIGHT_HAND",
    "PART_FACE",
]
