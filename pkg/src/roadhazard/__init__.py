"""Stereo road-hazard detection toolkit.

Direct planar hypothesis testing (PHT / FPHT), the point-compatibility
baseline, cluster-stixels and an evaluation harness, verified against a
built-in synthetic stereo scene generator.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    CameraRig,
    DisparityLine,
    FeasibleWedge,
    PatchSpec,
    Plane3D,
    disparity_line_to_plane,
    homography_from_plane,
    plane_to_disparity_line,
    project_onto_wedge,
    triangulate,
    wedge_for_hypothesis,
)
