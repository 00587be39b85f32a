"""Progressive cell search driving a first-order meta-learner, on a small numpy autodiff core."""

from .cells import Block, Branch, Cell, canonicalize, cell_depth, depth_distribution, enumerate_expansions
from .network import ModelState, Network, NetworkSpec, compile_network
from .reptile import MetaConfig, evaluate_meta, inner_adapt, reptile_outer_step, reptile_train
from .search import SearchConfig, SearchState, final_train, run_pnas_search
from .surrogate import encode_cell, surrogate_fit, surrogate_predict

__version__ = "0.1.0"
