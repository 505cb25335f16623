"""Choreography-conditioned 3D dance generation with flow matching."""
from .errors import ChoreoflowError
from .schema import SkeletonSchema, dim_layout, find_schema, load_schema
from .representation import ContinuousMotion, MotionCodec, MotionSequence

__version__ = "0.1.0"
