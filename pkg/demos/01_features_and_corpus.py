"""From a waveform to log-mel frames, then the synthetic two-factor corpus."""

import numpy as np

from laspa.features import FeatureConfig, Waveform, mel_spectrogram, resample
from laspa.synthcorpus import CorpusSpec, generate_corpus, label_matrix, make_trials

# one second of a 440 Hz tone recorded at 48 kHz
rate = 48000
t = np.arange(rate) / rate
wave = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), rate)

# the front end runs at 16 kHz: 25 ms Hamming window, 10 ms hop, 40 mel bands
cfg = FeatureConfig()
wave16 = resample(wave, cfg.sample_rate_hz)
mel = mel_spectrogram(wave16, cfg)
print("samples", len(wave16.samples), "-> frames", mel.frames.shape)
# the tone lands in one band; every frame agrees because the signal is stationary
print("loudest band per frame:", np.unique(mel.frames.argmax(axis=1)))

# the corpus skips audio entirely: frames are A_s * g_l(t) + b_s + noise
spec = CorpusSpec(n_speakers=6, n_languages=3, utts_per_speaker_per_language=4, frames_per_utt=60)
corpus = generate_corpus(spec)
spk, lng = label_matrix(corpus)
print(len(corpus), "utterances, e.g.", corpus[0].utt_id, corpus[0].mel.frames.shape)

# both factors are visible to a linear model on the per-utterance mean frame
means = np.array([u.mel.frames.mean(axis=0) for u in corpus])
design = np.hstack([means, np.ones((len(corpus), 1))])
for name, y in (("speaker", spk), ("language", lng)):
    w, *_ = np.linalg.lstsq(design, np.eye(y.max() + 1)[y], rcond=None)
    print(f"{name} least-squares fit accuracy: {np.mean((design @ w).argmax(1) == y):.2f}")

# cross-lingual trials: targets pair one speaker across two languages
trials = make_trials(corpus, "cross_lingual", n_target=10, n_nontarget=10, seed=0)
for trial in list(trials)[:3]:
    print(int(trial.is_target), trial.utt_a, trial.utt_b)
