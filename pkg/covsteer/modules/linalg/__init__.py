from .linalg import (
    EigenDecomp,
    SymMatrix,
    check_invertible,
    eig_sym,
    is_psd,
    min_eig,
    psd_factor,
    rank,
    schur_residual,
    spd_solve,
    symmetrize,
)

__all__ = [
    "EigenDecomp",
    "SymMatrix",
    "check_invertible",
    "eig_sym",
    "is_psd",
    "min_eig",
    "psd_factor",
    "rank",
    "schur_residual",
    "spd_solve",
    "symmetrize",
]
