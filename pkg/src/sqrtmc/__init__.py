"""sqrtmc: Monte Carlo laboratory for degenerate square-root diffusions on
the nonnegative orthant — anisotropic geometry in square-root coordinates,
exact subdivision/covering arithmetic, boundary-safe SDE simulation, and the
statistical estimators that check hitting, regularity, and ergodicity
properties at desk scale."""

from .coeffs import (CoefficientField, SmoothProbe, almost_diagonal_field,
                     check_condition_cprime, check_inv_conditions, cir_field,
                     constant_field, field_from_json, generator_apply,
                     sqrt_factor)
from .czdecomp import (DecompositionResult, DilationSets, SubdivisionNode,
                       build_dilations, cz_decompose, dichotomy, subdivide,
                       verify_a, verify_b)
from .geometry import (AnisoCube, HyperCube, Interval, SqrtPoint,
                       cube_contains, cube_measure, hypercube, interval,
                       is_regular, rescale, shift_shrink, sqrt_distance,
                       truncated_width)
from .gridset import GridSet
from .kernels import backend_name
from .sde import (Scheme, SimConfig, StoppedSample, StopKind, Trajectory,
                  exact_cir_step, rescaled_pair, sample_marginal,
                  simulate_stopped, simulate_stopped_batch, step_ft_euler)

__version__ = "0.1.0"
