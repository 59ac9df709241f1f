"""Train a small model for a few epochs, then score held-out speakers."""

import sys
from dataclasses import replace

import numpy as np
import torch

from laspa.eval import cross_lingual_similarity, eer, embed_corpus, min_dcf, score_trials, slr_probe
from laspa.synthcorpus import CorpusSpec, generate_corpus, make_trials
from laspa.training import ModelConfig, OptimizerConfig, infer_speaker_embedding, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

spec = CorpusSpec(n_speakers=10, utts_per_speaker_per_language=6, frames_per_utt=60)
train_corpus = generate_corpus(spec)
# new speakers from the same generator: same language bank, unseen voices
eval_corpus = generate_corpus(replace(spec, speaker_offset=spec.n_speakers))
trials = make_trials(eval_corpus, "cross_lingual", None, None, seed=1)

model = ModelConfig(n_speakers=spec.n_speakers, n_languages=spec.n_languages)
opt = OptimizerConfig(batch_size=30, epochs=epochs)
state, rows = train(model, opt, train_corpus, seed=0)
print("step 1   ", rows[0][2:])
print(f"step {state.step:<4d}", rows[-1][2:])

# inference touches the speaker encoder only
e = infer_speaker_embedding(state, eval_corpus[0].mel)
print("embedding", tuple(e.values.shape), "calls:", dict(state.calls))

scores = score_trials(state, eval_corpus, trials)
print(f"cross-lingual EER {eer(scores):.2f}%  minDCF {min_dcf(scores):.3f}")
emb = embed_corpus(state, eval_corpus)
lng = np.array([u.language_id for u in eval_corpus])
print(f"language probe {slr_probe(emb, lng):.1f}%  cross-lingual cosine {cross_lingual_similarity(emb, eval_corpus):.3f}")
