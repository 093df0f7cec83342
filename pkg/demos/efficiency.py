"""One network and one density lookup against a five-member ensemble.

Counts parameters and times a 256-row batch through both models. The
ensemble runs five full networks per input; Density-Regression runs one
network and adds one density query.
"""

import numpy as np

from densreg import numerics as nx
from densreg.data import TabularDataset
from densreg.training import TrainConfig, count_parameters, run_pipeline, time_inference, train_ensemble

rng = nx.make_rng(2)
X = rng.normal(size=(600, 11))
y = X @ rng.normal(size=11) + 0.3 * rng.normal(size=600)
train = TabularDataset(X, y)

# Short training; parameter counts and inference cost do not depend on it.
config = TrainConfig(stage1_epochs=20, density_epochs=20, stage3_epochs=20)
ours = run_pipeline(train, config)
ensemble = train_ensemble(train, config, M=5)

batch = X[:256]
ours.extractor.calls = ours.density.queries = 0
ours.predict(batch)
print(f"extractor passes: {ours.extractor.calls}, density queries: {ours.density.queries}")

p_ours, p_ens = count_parameters(ours), count_parameters(ensemble)
print(f"parameters: {p_ours} vs {p_ens} ({p_ens / p_ours:.1f}x)")

t_ours, t_ens = time_inference(ours, batch), time_inference(ensemble, batch)
print(f"median latency on 256 rows: {t_ours * 1e3:.2f} ms vs {t_ens * 1e3:.2f} ms")
