from . import autodiff as ad
from .autodiff import Tape, Var
from .linalg import directional_fd, finite_diff_grad, jacobi_eigh, rel_err, sym_psd_sqrt
from .optim import AdamState, adam_step
from .rng import Rng, gaussian_sample

__all__ = [
    "ad",
    "Tape",
    "Var",
    "Rng",
    "gaussian_sample",
    "AdamState",
    "adam_step",
    "finite_diff_grad",
    "directional_fd",
    "sym_psd_sqrt",
    "jacobi_eigh",
    "rel_err",
]
