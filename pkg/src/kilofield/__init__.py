"""kilofield: a grid of tiny MLPs as a renderable neural signed distance field.

Train (distill + fine-tune), evaluate (Chamfer/PSNR/SSIM), and render
(sphere tracing, Lambertian path tracing, WebSocket streaming) a bounding
box partitioned into N^3 cells, each owning one SDF and one color MLP.
"""

__version__ = "0.1.0"

from .grid import GridConfig, KiloField, field_init  # noqa: F401
from .teacher import AnalyticTeacher  # noqa: F401
