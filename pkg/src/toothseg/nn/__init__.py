from .curve import (
    CICBlock,
    CurveAggregation,
    CurveBranch,
    CurveBranchConfig,
    CurveGrouping,
    CurveSet,
    LPFA,
    cic_block,
    curve_aggregation,
    curve_forward,
    curve_grouping,
    lpfa,
)
from .geometry import (
    GeometricAffine,
    GeometryBranch,
    GeometryBranchConfig,
    ResPBlock,
    StageConfig,
    geometric_affine,
    geometry_forward,
)
from .head import NUM_CLASSES, HeadConfig, SegHead, fuse_and_classify
from .ops import farthest_point_sample, interpolate_features, knn
