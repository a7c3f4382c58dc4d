"""Lifted linear predictors and dense-form MPC for nonlinear systems."""

from .dictionary import (BasisFn, DelayVector, Dictionary, identity_dictionary,
                         make_delay_vector, make_kdv_dictionary,
                         make_polynomial_dictionary, make_rbf_dictionary)
from .edmd import (DataSet, FitReport, LiftedModel, fit_io_model, fit_model,
                   lift_dataset, load_model, normal_equation_data, save_model)
from .mpc import (DenseQp, KoopmanMpc, LinearizedMpc, MpcSpec, TrackingSpec,
                  closed_loop, condense, translate_nmpc, translate_tracking)
from .predictor import (Trajectory, build_carleman, compare_predictors,
                        local_linearization_predictor, rmse, rollout_lifted)
from .qp import QpProblem, QpSolution, QpSolver, kkt_check, solve_qp

__version__ = "0.1.0"
