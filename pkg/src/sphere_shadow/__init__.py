"""Second species orbits of a particle on the sphere near two heavy bodies.

Modules: ``geom`` (sphere geometry), ``dynamics`` (restricted problem and its
integrator), ``skeleton`` (eps = 0 collision orbits and their graph),
``action`` (fixed-energy BVPs and the Maupertuis action), ``shadow``
(multiple-shooting shadowing orbits, bounds, monodromy), ``twobody`` (reduced
two-body problem) and ``cli``.
"""

from .dynamics import State, SystemParams, integrate, jacobi
from .geom import SpherePoint, rotate, sphere_distance
from .shadow import ChainSpec, SolveOptions, monodromy_and_lyapunov, solve, verify_bounds
from .skeleton import build_graph, make_collision_orbit

__version__ = "0.1.0"

__all__ = [
    "ChainSpec", "SolveOptions", "SpherePoint", "State", "SystemParams", "build_graph",
    "integrate", "jacobi", "make_collision_orbit", "monodromy_and_lyapunov", "rotate",
    "solve", "sphere_distance", "verify_bounds",
]
