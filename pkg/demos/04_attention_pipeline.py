"""The attention stack end to end on one episode: support weights from
intra/inter scores, query weights from the query's own scores, blended
task weights, and the class probabilities they produce.

Also dumps the per-channel weight vectors to CSV for plotting.
"""

import numpy as np

from tdmfew import numeric as nm
from tdmfew.attention import TdmConfig, dump_weights_csv, fc_forward, sam, qam
from tdmfew.checks import micro_episode
from tdmfew.model import TdmModel
from tdmfew.numeric import Rng
from tdmfew.scores import intra_scores, inter_scores, prototype
from tdmfew.backbone import extract

config = TdmConfig(alpha=0.5, beta=0.5, sam=True, qam=True, iam=True)
model = TdmModel(Rng(0).child(1), channels=16, tdm=config)
episode = micro_episode(seed=1, n_way=3, k_shot=2, n_query=4)

with nm.no_grad():
    result = model.forward_episode(episode, "eval", want_weights=True)
print(f"episode loss {result.loss.item():.4f}, accuracy {result.accuracy:.2f}")
w = result.weights
print("support weights  (N,C):", w["w_support"].shape,
      f"range {w['w_support'].min():.3f}..{w['w_support'].max():.3f}")
print("query weights    (Q,C):", w["w_query"].shape,
      f"range {w['w_query'].min():.3f}..{w['w_query'].max():.3f}")
print("task weights   (Q,N,C):", w["w_task"].shape)

# the same quantities by hand, via the public pieces
with nm.no_grad():
    feats = extract(model.backbone, episode.support_flat(), "eval",
                    iam_enabled=True, tdm_config=config)
    n, k = episode.n_way, episode.k_shot
    protos = prototype(nm.reshape(feats, (n, k) + feats.shape[1:]))
    w_intra = fc_forward(model.b_intra, intra_scores(protos), "eval", None, config)
    w_inter = fc_forward(model.b_inter, inter_scores(protos), "eval", None, config)
    w_support = sam(protos, model.b_intra, model.b_inter, config, "eval", None)
assert np.allclose(w_support.data,
                   0.5 * w_intra.data + 0.5 * w_inter.data, atol=1e-12)
print("\nsam == alpha * b_intra(R_intra) + (1-alpha) * b_inter(R_inter): ok")

dump_weights_csv("episode_weights.csv", 0, w_intra.data, w_inter.data,
                 w_support.data, w["w_query"][0], w["w_task"][0])
print("wrote episode_weights.csv (episode, class, channel, w_*)")

# ablation semantics: switches off -> exact plain-baseline behaviour
plain = TdmModel(Rng(0).child(1), channels=16,
                 tdm=TdmConfig(sam=False, qam=False, iam=False))
with nm.no_grad():
    off = plain.forward_episode(episode, "eval")
print(f"\nall modules off: accuracy {off.accuracy:.2f} "
      f"(plain prototype-network path, bitwise)")
