"""Full model vs no prefix tokens vs speaker encoder alone, on the default corpus.

Pass an epoch count to shorten the run (the default, 30, takes ~12 minutes
on one core).
"""

import sys

import torch

from laspa.config import parse_config
from laspa.eval import run_ablation
from laspa.synthcorpus import generate_corpus, make_trials

torch.set_num_threads(int(sys.argv[2]) if len(sys.argv) > 2 else 1)
epochs = sys.argv[1] if len(sys.argv) > 1 else "30"
cfg = parse_config("", [f"optimizer.epochs={epochs}"])

train_corpus = generate_corpus(cfg.corpus)
eval_corpus = generate_corpus(cfg.eval_corpus_spec())
trials = make_trials(eval_corpus, cfg.eval.trial_kind, *cfg.trial_counts(), seed=cfg.eval.trial_seed)
print(len(trials), "trials,", trials.n_target, "targets")

result = run_ablation(cfg.model_config(), cfg.optimizer, train_corpus, eval_corpus, trials, seed=cfg.seed)
print(result.format())
for variant, extra in result.extras.items():
    print(f"{variant:<13s} cross-lingual cosine {extra['cross_lingual_cosine']:.4f}")
