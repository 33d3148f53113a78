"""Texel-space Jacobian fields for rigging 3D Gaussians to a deforming triangle mesh.

Typical flow::

    face_map = rasterize_faces(rest, 64, 64)
    frames = frame_arrays(load_pair(rest, deformed))
    field = dilate_field(build_jacobian_field(frames, face_map), 2)
    local = LocalAttributeMaps.surface_init(rest, face_map)
    image = render(lift_quasi_phong(local, field), camera).image
"""

from .errors import (AllNeighborsInvalid, ConfigError, DataError, DegenerateFace, ImageTooSmall,
                     IndexOutOfRange, InvalidMesh, MissingUV, NoSeams, NonFiniteLoss, NonPSD,
                     NumericError, ParseError, ShapeMismatch, TexrigError, TopologyMismatch,
                     ZeroQuaternion)
from .fit import (FitConfig, Frame, LossWeights, perturb, prepare_scene, read_trace,
                  total_loss, write_trace)
from .losses import loss_l1, loss_reg_position, loss_reg_scale, loss_ssim, psnr, ssim
from .mesh import (FaceFrame, MeshPair, TriMesh, Variant, all_face_frames, face_frame,
                   frame_arrays, load_pair)
from .objfile import parse_obj, write_obj
from .render import Camera, RenderOutput, Splat2D, project, render, render_backward
from .rig import (GlobalGaussianSet, LocalAttributeMaps, assemble_local_covariance,
                  export_gaussians, import_gaussians, lift_naive, lift_quasi_phong)
from .seams import SeamReport, compare_seams
from .texel import (FaceIdMap, JacobianField, build_jacobian_field, corner_lattice_resample,
                    dilate_field, rasterize_faces, read_field, sample_bilinear, write_field)

__version__ = "0.1.0"
