"""meshsim: learned simulation on triangle meshes.

Graph-network dynamics models with hand-written backprop, anisotropic local
remeshing driven by sizing fields, synthetic cloth and diffusion ground-truth
solvers, and a CLI for dataset generation, training, rollout, and evaluation.
"""

from .mesh import NodeType, SimMesh, make_mesh

__version__ = "0.1.0"

__all__ = ["NodeType", "SimMesh", "make_mesh", "__version__"]
