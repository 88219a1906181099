"""radiodepth: dual-face depth losses, fixed-geometry X-ray back-projection,
statistical-shape completion and 3D shape metrics on synthetic radiographs."""

__version__ = "0.1.0"

from .geometry import (
    DepthMap,
    DepthMapSet,
    ImagingGeometry,
    PointCloud,
    backproject,
    backproject_set,
    default_geometry,
    pixel_footprint_area,
    pixel_ray,
    project_depth,
)
from .losses import (
    LossConfig,
    LossResult,
    casi_dep,
    casi_error,
    casi_indep,
    evaluate_loss,
    si_dep,
    si_indep,
    si_loss,
)
from .phantom import (
    JitterParams,
    LabelMask,
    PhantomScene,
    Primitive,
    ray_intersect,
    render_ground_truth,
    sample_scene,
    sample_surface_points,
)
from .depthfit import DepthInit, FitConfig, PatchDepthRegressor, optimize_depth
from .ssm import (
    CorrespondedShapeSet,
    ShapeCompleter,
    ShapeModel,
    SsmFitConfig,
    build_ssm,
    fit_ssm,
    generalized_procrustes,
    ssm_cost,
)
from .metrics import (
    SurfaceMetricReport,
    assd,
    cd_l2,
    depth_errors,
    dice,
    emd,
    hd95,
    pcc,
    surface_metrics,
    volume_from_thickness,
)
from .pipeline import ExperimentConfig, compare_report, run_pipeline, validate_files
