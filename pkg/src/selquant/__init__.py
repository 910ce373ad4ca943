"""Sensor selection and adaptive quantization for MMSE field estimation
over packet-lossy mMTC uplinks."""

from .estimator import (DecodingOutcome, EnumerationCapError, MseEvaluator,
                        MseReport, SelectionPlan, SingularSubsetError,
                        averaged_mse, bounded_mse, decoding_outcomes,
                        mmse_estimate, mse_for_subset, mse_report)
from .field import (CorrelationSpec, FactorizationError, FieldModel,
                    SensorLayout, build_prior_cov, load_layout, place_sensors,
                    sample_realization, sample_realizations, save_layout)
from .kalman import (DynamicsModel, HorizonResult, KalmanState, correct,
                     frame_mse, predict, run_horizon, stationary_dynamics)
from .link import (CodingModel, LinkProfile, McsEntry, SlotConfig,
                   build_link_profile, channel_gain, coded_per,
                   default_mcs_table, load_mcs_table, power_consumed, raw_ber,
                   raw_per, save_mcs_table, snr)
from .optimizer import (InfeasiblePowerError, InfeasibleSelectionError,
                        OptimizerConfig, OptimizerTrace, baseline_channel_gain,
                        baseline_error_free, baseline_random, optimize_joint,
                        optimize_rows_only, optimize_separate)
from .quantizer import (QuantizerSpec, dynamic_margin, quant_noise_cov,
                        quant_noise_variances, quantize)

__version__ = "0.1.0"
