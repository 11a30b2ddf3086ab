import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import ncasm  # noqa: E402


@pytest.fixture(scope="session")
def example1():
    return ncasm.example1_theta()


@pytest.fixture(scope="session")
def stable_example():
    """The two-mode example with causal matrices scaled by 0.9 so it stays bounded."""
    theta = ncasm.example1_theta()
    return theta.updated(A_c=0.9 * np.array(theta.A_c))


def single_mode_theta(A_c, C_c, Sig_c, A_a, C_a, Sig_a, Sig_m):
    return ncasm.ThetaBundle.from_arrays(
        A_c=[A_c], C_c=[C_c], Sigma_c=[Sig_c], A_a=[A_a], C_a=[C_a], Sigma_a=[Sig_a],
        pi_c=[1.0], pi_a=[1.0], Sigma_m=Sig_m,
    )
