"""MIMO channel estimation via an energy-based diffusion model with
Metropolis-Hastings-corrected posterior sampling, plus the supporting
pipeline: synthetic clustered channels, pilot measurements, unsupervised
training, linear baselines, and a seeded NMSE benchmark harness.
"""

__version__ = "0.1.0"

from .analytic import AnnealedGaussianEnergy, GaussianEnergy, gaussian_posterior
from .autodiff import AdamState, Graph, adam_init, adam_step, evaluate, gradient
from .baselines import LmmseModel, lmmse_estimate, lmmse_fit, rls_estimate
from .bench import ExperimentConfig, ResultRow, nmse, nmse_db, run_benchmark
from .channels import (ChannelConfig, ChannelDataset, ChannelSample,
                       build_dataset, generate_channel, load_dataset,
                       save_dataset, steering_vector, to_angular)
from .diffusion import (EnergyModel, NetConfig, NoiseSchedule, TrainConfig,
                        forward_diffuse, linear_schedule, load_checkpoint,
                        loss_ebm, save_checkpoint, train)
from .linalg import SymEig, dft_matrix, kron, spectral_solve, sym_eig
from .measurement import (EstimationProblem, PilotMatrix, build_operator,
                          gen_pilots, make_problem, sigma2_from_snr, synthesize)
from .sampler import (SamplerConfig, SamplerTrace, log_likelihood,
                      likelihood_score, mh_log_acceptance, prior_score,
                      propose, sample_posterior, transition_logpdf)
