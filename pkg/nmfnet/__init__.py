from .cascade import Cascade, DelayModel, generate_dataset, load_dataset, simulate_cascade
from .evaluation import influence_mae, prob_mae, structure_metrics, threshold_edges
from .graph import DirectedNetwork, generate_network, load_network, save_network
from .influence_max import ImProblem, brute_force_select, evaluate_selection, greedy_select
from .model import NeuralMeanField
from .nmf_core import NmfParameters, estimate_influence, forward_exp_kernel, forward_window_kernel
from .oracle import ctmc_marginals, mc_marginals, moment_system_marginals
from .training import TrainConfig, backward_gradient, train
from .version import __version__
