"""Hard-sphere gas fluctuations on the torus and their Boltzmann-limit check."""

from .geometry import (TestFunction, maxwellian_density, maxwellian_sample,
                       minimum_image, scatter, torus_distance)
from .gibbs import (Configuration, EnsembleParams, GibbsSamplingError,
                    boltzmann_grad_mu, expectation, sample_gibbs)
from .dynamics import (CollisionEvent, CollisionGraph, ConditioningParams,
                       EventLog, FlowError, check_upsilon, clustering_tree,
                       collision_graph, distance_clusters, first_cycle_event,
                       next_pair_collision, run_flow)
from .pseudo import (CollisionTree, PseudoParams, backward_characteristic,
                     chi_indicator, develop_phi, overlap_free, run_pseudo,
                     tree_weight)
from .linboltz import (SemigroupEstimate, VelocityGrid, apply_L,
                       collision_rate, duhamel_series_oracle,
                       fourier_mode_solver, semigroup_mc)
from .harness import (CovarianceReport, ExperimentConfig, convergence_experiment,
                      covariance_estimate, emit_report, fluctuation_field)
from .registry import REGISTRY, get_test_function

__version__ = "0.1.0"
