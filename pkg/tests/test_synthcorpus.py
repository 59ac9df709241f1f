from itertools import combinations

import numpy as np
import pytest

from laspa.synthcorpus import CorpusSpec, generate_corpus, label_matrix, language_trajectory, make_trials


def lstsq_probe_accuracy(x, y, seed=0):
    """Least-squares one-vs-all linear classifier, trained on one half, scored on the other."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(y))
    tr, te = idx[: len(y) // 2], idx[len(y) // 2:]
    design = np.hstack([x, np.ones((len(y), 1))])
    onehot = np.eye(y.max() + 1)[y]
    w, *_ = np.linalg.lstsq(design[tr], onehot[tr], rcond=None)
    return np.mean(np.argmax(design[te] @ w, axis=1) == y[te])


def test_counts_and_cells():
    spec = CorpusSpec(n_speakers=2, n_languages=2, utts_per_speaker_per_language=3, frames_per_utt=50, n_mels=40, seed=7)
    corpus = generate_corpus(spec)
    assert len(corpus) == 12
    cells = {(u.speaker_id, u.language_id) for u in corpus}
    assert cells == {(0, 0), (0, 1), (1, 0), (1, 1)}
    assert all(u.mel.frames.shape == (50, 40) for u in corpus)
    assert len({u.utt_id for u in corpus}) == 12


def test_same_seed_is_bitwise_identical():
    spec = CorpusSpec(n_speakers=2, n_languages=2, utts_per_speaker_per_language=3, frames_per_utt=50, seed=7)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert all(np.array_equal(x.mel.frames, y.mel.frames) for x, y in zip(a, b))
    c = generate_corpus(CorpusSpec(n_speakers=2, n_languages=2, utts_per_speaker_per_language=3, frames_per_utt=50, seed=8))
    assert not np.array_equal(a[0].mel.frames, c[0].mel.frames)


def test_streams_are_order_independent():
    # a bigger corpus contains the smaller one verbatim: each utterance has its own stream
    small = generate_corpus(CorpusSpec(n_speakers=2, n_languages=2, utts_per_speaker_per_language=2, frames_per_utt=20, seed=3))
    big = generate_corpus(CorpusSpec(n_speakers=4, n_languages=2, utts_per_speaker_per_language=2, frames_per_utt=20, seed=3))
    by_id = {u.utt_id: u for u in big}
    for u in small:
        assert np.array_equal(u.mel.frames, by_id[u.utt_id].mel.frames)


def test_speaker_offset_draws_new_speakers_same_languages():
    base = CorpusSpec(n_speakers=3, n_languages=2, utts_per_speaker_per_language=1, frames_per_utt=20, seed=1)
    held = CorpusSpec(n_speakers=3, n_languages=2, utts_per_speaker_per_language=1, frames_per_utt=20, seed=1, speaker_offset=3)
    ids_a = {u.utt_id for u in generate_corpus(base)}
    ids_b = {u.utt_id for u in generate_corpus(held)}
    assert not ids_a & ids_b
    assert np.array_equal(language_trajectory(base, 1, 30), language_trajectory(held, 1, 30))


def test_language_cycle_lengths():
    spec = CorpusSpec(n_languages=3, n_mels=8)
    for lang in range(3):
        g = language_trajectory(spec, lang, 60)
        period = 3 + 2 * lang
        np.testing.assert_array_equal(g[period:], g[:-period])


def test_linear_probe_recovers_both_factors():
    spec = CorpusSpec(n_speakers=10, n_languages=3, utts_per_speaker_per_language=6, frames_per_utt=50, noise_std=0.05, seed=11)
    corpus = generate_corpus(spec)
    means = np.array([u.mel.frames.mean(axis=0) for u in corpus])
    spk, lng = label_matrix(corpus)
    assert lstsq_probe_accuracy(means, spk) > 0.9
    assert lstsq_probe_accuracy(means, lng) > 0.9


def test_factor_labels_uncorrelated_by_design():
    corpus = generate_corpus(CorpusSpec(n_speakers=5, n_languages=3, utts_per_speaker_per_language=2, frames_per_utt=10))
    spk, lng = label_matrix(corpus)
    s1 = np.eye(5)[spk] - np.eye(5)[spk].mean(0)
    l1 = np.eye(3)[lng] - np.eye(3)[lng].mean(0)
    np.testing.assert_allclose(s1.T @ l1, 0.0, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(n_speakers=1)
    with pytest.raises(ValueError):
        CorpusSpec(n_languages=1)
    with pytest.raises(ValueError):
        CorpusSpec(noise_std=-1)


def small_corpus(n_speakers=2, n_languages=2, utts=1):
    return generate_corpus(
        CorpusSpec(n_speakers=n_speakers, n_languages=n_languages, utts_per_speaker_per_language=utts, frames_per_utt=8, n_mels=4)
    )


def test_cross_lingual_exhaustive_targets():
    corpus = small_corpus()
    trials = make_trials(corpus, "cross_lingual", 2, 0, seed=0)
    expected = set()
    for a, b in combinations(corpus, 2):
        if a.speaker_id == b.speaker_id and a.language_id != b.language_id:
            expected.add((a.utt_id, b.utt_id))
    assert {(t.utt_a, t.utt_b) for t in trials} == expected
    assert trials.n_target == 2


def test_monolingual_on_single_language_speakers():
    corpus = small_corpus(n_speakers=4, n_languages=2, utts=3)
    # keep speaker s only in language s % 2
    corpus = [u for u in corpus if u.language_id == u.speaker_id % 2]
    trials = make_trials(corpus, "monolingual", None, None, seed=0)
    by_id = {u.utt_id: u for u in corpus}
    assert trials.n_target > 0
    assert all(by_id[t.utt_a].language_id == by_id[t.utt_b].language_id for t in trials)
    with pytest.raises(ValueError, match="only 0"):
        make_trials(corpus, "cross_lingual", 1, 0)


@pytest.mark.parametrize("kind", ["monolingual", "cross_lingual"])
def test_trial_labels_definitional(kind):
    corpus = small_corpus(n_speakers=4, n_languages=3, utts=2)
    trials = make_trials(corpus, kind, 10, 40, seed=5)
    by_id = {u.utt_id: u for u in corpus}
    assert len(trials) == 50
    pairs = [(t.utt_a, t.utt_b) for t in trials]
    assert len(set(pairs)) == len(pairs)
    for t in trials:
        a, b = by_id[t.utt_a], by_id[t.utt_b]
        assert t.utt_a != t.utt_b
        assert (a.speaker_id == b.speaker_id) == t.is_target
        if kind == "monolingual":
            assert a.language_id == b.language_id
        elif t.is_target:
            assert a.language_id != b.language_id


def test_trials_deterministic_and_seeded():
    corpus = small_corpus(n_speakers=4, n_languages=3, utts=2)
    a = make_trials(corpus, "cross_lingual", 10, 10, seed=1)
    b = make_trials(corpus, "cross_lingual", 10, 10, seed=1)
    c = make_trials(corpus, "cross_lingual", 10, 10, seed=2)
    assert a == b
    assert a != c


def test_trial_request_too_large():
    corpus = small_corpus()
    with pytest.raises(ValueError, match=r"requested 3 target .* only 2"):
        make_trials(corpus, "cross_lingual", 3, 0)
