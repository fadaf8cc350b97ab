"""Simulation-ready garment assets from multi-view video.

Triangle meshes carry face-attached 3D Gaussians stored in a UV texture. The
package registers such assets to multi-view frames by differentiable splatting
plus cloth energies, and simulates, untangles and resizes them with a classical
cloth stepper.
"""
from .errors import DivergenceError, GarmentError, ValidationError
from .mesh import SurfacePoint, Topology, TriangleMesh, build_topology
from .meshio import load_mesh, save_mesh
from .texture import GaussianTexture, attach, bind_texture, initial_texture
from .render import Camera, rasterize, rasterize_backward, visibility_mask
from .losses import psnr, rgb_loss, ssim
from .registration import (FrameObservation, RegistrationConfig, RegistrationResult, align_first_frame,
                           init_appearance, register_frame, register_sequence)
from .simulator import (BodyMotion, MaterialField, RestGeometry, SimConfig, SimState, fit_behavior, resize,
                        simulate, step, untangle_all, untangle_one)
from .metrics import MetricReport, PointCloud, chamfer_p2m_fscore, evaluate, psnr_ssim
from .asset import GarmentAsset, load_asset, save_asset
from .scenes import make_synthetic_scene

__version__ = "0.1.0"
