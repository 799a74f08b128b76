"""
Data model and the attention network at initialization
======================================================

Each sample is M tokens: the label's signal vector, one loud noise token and
M-2 quiet ones.  Noise lives in the complement of the two signal directions.
"""
import numpy as np

from attnlab.data_model import DataModelParams, generate_dataset, snr
from attnlab.model import Dims, InitConfig, attention_rows, default_init_std, forward, init_model
from attnlab.numerics import Rng

p = DataModelParams(d=256, M=8, mu_norm=6.4, sigma_p=0.2)
print("SNR", snr(p), "loud token std", p.sigma_p_tilde)

data = generate_dataset(12, p, Rng(0))
print("labels", data.y)
print("token norms of sample 0:", np.linalg.norm(data.X[0], axis=1).round(2))

# noise never leaks into the signal coordinates
print("max |noise . e1|, |noise . e2|:", np.abs(data.X[:, 1:, :2]).max())

s = default_init_std(p.d)
params = init_model(InitConfig(s, s, seed=1), Dims(p.d, 128, 128, p.M))

# with small weights every attention row is close to uniform
A = attention_rows(params, data.X)
print("max deviation from 1/M at init:", np.abs(A - 1 / p.M).max())
print("outputs at init:", forward(params, data.X).round(5))
