"""
Closed-form gradients against finite differences
================================================

The three weight gradients are written in terms of the softmax Jacobian
diag(phi) - phi phi^T.  A five-point finite difference stencil checks them.
"""
import numpy as np

from attnlab.data_model import DataModelParams, generate_dataset
from attnlab.loss_grad import analytic_gradients, finite_difference_gradients, max_relative_error, softmax_jacobian
from attnlab.model import Dims, InitConfig, init_model
from attnlab.numerics import Rng, stable_softmax

for seed in range(5):
    r = Rng(seed)
    p = DataModelParams(d=8, M=3, mu_norm=1.0, sigma_p=0.5, cp=1.5)
    data = generate_dataset(4, p, r.split("data"))
    params = init_model(InitConfig(0.5, 0.5, seed=r.split("init").seed), Dims(8, 4, 4, 3))
    err = max_relative_error(analytic_gradients(params, data), finite_difference_gradients(params, data))
    print(f"instance {seed}: max relative error {err:.2e}")

# the Jacobian rows sum to zero and it is positive semi-definite
J = softmax_jacobian(stable_softmax(np.array([1.0, -0.5, 0.3, 2.0])))
print(J.round(4))
print("row sums", J.sum(axis=1), "eigenvalues", np.linalg.eigvalsh(J).round(5))

# W_V only ever receives a rank one update along w_O
g = analytic_gradients(params, data).g_WV
print("singular values of grad W_V:", np.linalg.svd(g, compute_uv=False).round(8))
