"""Periodic-orbit families, Floquet eigenfunctions, unstable manifolds, and
orbit-to-torus connecting orbits in the circular restricted three-body problem,
computed with Gauss-Legendre collocation and pseudo-arclength continuation."""

__version__ = "0.1.0"

from .dynamics import energy, libration_points, oscillatory_pair, vector_field
from .collocation import CollocationSystem, Mesh, MeshedSolution
from .continuation import (Controls, ContinuationFrame, Tangent,
                           compute_tangent, run_continuation)
from .orbits import (FamilyResult, PeriodicOrbit, compute_family,
                     continue_to_energy, equilibrium_frame, orbit_multipliers,
                     periodic_problem, refine_to_energy, refine_to_period,
                     switch_to_bifurcating_family)
from .floquet import EigenPacket, continue_packet, grow_eigenfunction
from .manifold import (FundamentalDomain, ManifoldOrbit, Section,
                       add_winding, extend_by_loop, fundamental_domain,
                       grow_orbit, shooting_compare, sweep_manifold)
from .connections import (ConnectionFamily, ConnectionRecord,
                          CoupledConnection, assemble_coupled,
                          classify_connection, continue_connection,
                          extend_orbit, refine_connection_to_energy,
                          section_trace, winding_stats)
from .io import (RunConfig, SolutionFile, load_config, load_solution,
                 read_records_csv, save_solution, write_records_csv)
