"""Agent checks: message generation in every decode mode, receiver
reads, candidate scoring, and the reference language model."""

import numpy as np
import pytest

import refgame.agents as agents
import refgame.autograd as ag
import refgame.nn as nn
import refgame.sampling as smp


def make_sender(seed=0, vocab_size=3, max_len=2, d=4, embed=5, hidden=6, **kw):
    vocab = agents.Vocabulary(vocab_size, max_len)
    rng = np.random.default_rng(seed)
    return agents.Sender.create(rng, vocab, d, embed, hidden, **kw)


def make_receiver(seed=1, vocab_size=3, max_len=2, d=4, embed=5, hidden=6):
    vocab = agents.Vocabulary(vocab_size, max_len)
    rng = np.random.default_rng(seed)
    return agents.Receiver.create(rng, vocab, d, embed, hidden)


def zero_params(component):
    for _, t in component.named_params():
        t.data[...] = 0.0


def enumerate_messages(vocab):
    """Every possible message: EOS-terminated short ones plus full-length
    ordinary sequences."""
    out = []
    def rec(prefix):
        if len(prefix) == vocab.max_len:
            out.append(tuple(prefix))
            return
        out.append(tuple(prefix + [vocab.eos]))
        for w in range(vocab.size):
            rec(prefix + [w])
    rec([])
    return out


def message_log_prob(sender, feats, tokens):
    """Teacher-forced log q of one token sequence, by replaying the
    sender's recurrence outside of generate."""
    x = ag.tensor(np.asarray(feats, dtype=np.float64).reshape(1, -1))
    h = sender.eta_h(x)
    c = sender.eta_c(x)
    inp = sender.embed.hard([sender.vocab.start])
    total = 0.0
    for tok in tokens:
        h, c = sender.cell.step(inp, h, c)
        logits = sender.proj(h)
        logq = ag.log_softmax_rows(logits)
        total += float(logq.data[0, tok])
        inp = sender.embed.hard([int(tok)])
    return total


def test_vocabulary_reserved_ids():
    v = agents.Vocabulary(5, 4)
    assert v.eos == 5 and v.start == 6
    assert v.n_outcomes == 6 and v.n_embed == 7
    with pytest.raises(ValueError):
        agents.Vocabulary(0, 4)
    with pytest.raises(ValueError):
        agents.Vocabulary(5, 0)


def test_greedy_mode_deterministic():
    s = make_sender(seed=3, vocab_size=6, max_len=5)
    feats = np.random.default_rng(0).normal(size=4)
    m1 = agents.sender_generate(s, feats, "greedy")
    m2 = agents.sender_generate(s, feats, "greedy")
    assert m1.tokens == m2.tokens
    assert m1.log_probs == m2.log_probs


def test_forced_eos_gives_lone_eos_message():
    s = make_sender(seed=0, vocab_size=4, max_len=5)
    s.proj.w.data[...] = 0.0
    s.proj.b.data[...] = 0.0
    s.proj.b.data[s.vocab.eos] = 40.0
    for mode in ("sample", "greedy", "straight_through"):
        m = agents.sender_generate(s, np.ones(4), mode,
                                   rng=np.random.default_rng(1))
        assert m.tokens == [s.vocab.eos], mode


def test_messages_terminate_and_never_contain_start():
    s = make_sender(seed=7, vocab_size=4, max_len=3)
    rng = np.random.default_rng(2)
    for mode in ("sample", "greedy", "straight_through", "relaxed"):
        for _ in range(40):
            feats = rng.normal(size=4)
            m = agents.sender_generate(s, feats, mode, rng=rng)
            assert 1 <= len(m.tokens) <= 3
            assert s.vocab.start not in m.tokens
            if len(m.tokens) < 3:
                assert m.tokens[-1] == s.vocab.eos


def test_sample_distribution_matches_enumeration():
    """|V|=3, L=2: 13 possible messages; 1e5 draws against the exact
    q(m|t) from teacher-forced replay, total variation < 0.02."""
    s = make_sender(seed=11, vocab_size=3, max_len=2)
    feats = np.random.default_rng(5).normal(size=4)
    msgs = enumerate_messages(s.vocab)
    assert len(msgs) == 13
    exact = np.array([np.exp(message_log_prob(s, feats, m)) for m in msgs])
    assert abs(exact.sum() - 1.0) < 1e-9

    n = 100000
    tiled = np.tile(feats, (n, 1))
    roll = agents.generate_batch(s, tiled, "sample",
                                 rng=smp.stream(0, smp.DOMAIN_GUMBEL, 77))
    counts = dict.fromkeys(msgs, 0)
    for j in range(n):
        length = int(roll.lengths[j])
        counts[tuple(int(t) for t in roll.tokens[:length, j])] += 1
    emp = np.array([counts[m] for m in msgs]) / n
    assert 0.5 * np.abs(emp - exact).sum() < 0.02


def test_sampled_log_probs_match_replay():
    s = make_sender(seed=4, vocab_size=4, max_len=3)
    rng = np.random.default_rng(9)
    for _ in range(10):
        feats = rng.normal(size=4)
        m = agents.sender_generate(s, feats, "sample", rng=rng)
        assert abs(sum(m.log_probs) - message_log_prob(s, feats, m.tokens)) < 1e-12


def test_greedy_picks_the_per_step_argmax():
    """Each greedy token maximizes its step distribution, so swapping the
    final token for any alternative lowers the total log-prob."""
    s = make_sender(seed=13, vocab_size=5, max_len=4)
    feats = np.random.default_rng(3).normal(size=4)
    m = agents.sender_generate(s, feats, "greedy")
    for t, tok in enumerate(m.tokens):
        prefix = m.tokens[:t]
        scores = [message_log_prob(s, feats, prefix + [k])
                  for k in range(s.vocab.n_outcomes)]
        assert int(np.argmax(scores)) == tok
    total = sum(m.log_probs)
    for k in range(s.vocab.n_outcomes):
        if k == m.tokens[-1]:
            continue
        alt = m.tokens[:-1] + [k]
        assert message_log_prob(s, feats, alt) < total


def test_receiver_read_deterministic_and_rejects_empty():
    r = make_receiver()
    g1 = agents.receiver_read(r, [0, 2, r.vocab.eos])
    g2 = agents.receiver_read(r, [0, 2, r.vocab.eos])
    assert np.array_equal(g1.data, g2.data)
    with pytest.raises(ValueError):
        agents.receiver_read(r, [])


def test_receiver_relaxed_one_hots_equal_discrete():
    """Exact one-hot relaxed vectors must reproduce the hard-embedding
    read bitwise."""
    r = make_receiver(seed=5)
    tokens = [1, 0, r.vocab.eos]
    onehots = []
    for tok in tokens:
        w = np.zeros(r.vocab.n_outcomes)
        w[tok] = 1.0
        onehots.append(ag.tensor(w))
    msg = agents.Message(tokens=tokens, log_probs=[0.0] * 3, relaxed=onehots,
                         onehots=onehots)
    hard = agents.receiver_read(r, msg, "discrete")
    soft = agents.receiver_read(r, msg, "relaxed")
    assert np.array_equal(hard.data, soft.data)


def test_receiver_read_gradcheck():
    """Finite differences on a scalar probe of g(h_last), length-3
    message, every receiver parameter."""
    r = make_receiver(seed=8)
    ps = r.param_set()
    probe = np.random.default_rng(21).normal(size=4)
    tokens = [2, 1, r.vocab.eos]

    def value():
        return float(agents.receiver_read(r, tokens).data @ probe)

    with ag.tape() as tp:
        ps.zero_grads()
        g = agents.receiver_read(r, tokens)
        tp.backward(ag.sum_all(ag.mul(g, ag.tensor(probe.copy()))))
    grads = ps.grads()

    eps = 1e-5
    for name in ps.names:
        p = ps.tensors[name]
        flat = p.data.reshape(-1)
        idx = np.random.default_rng(hash(name) % 2**32).choice(flat.size, size=min(4, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = value()
            flat[i] = keep - eps
            down = value()
            flat[i] = keep
            num = (up - down) / (2 * eps)
            ana = grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-5 * max(1.0, abs(num), abs(ana)), name


def test_score_images_examples():
    g = np.array([1.0, 0.0, 2.0])
    cands = np.array([[1.0, 0.0, 2.0],
                      [0.5, 3.0, 0.0],
                      [1.0, 0.0, 2.0]])
    scores = agents.score_images(g, cands)
    assert scores.data[0] == scores.data[2]
    assert abs(scores.data[0] - 5.0) < 1e-12
    with pytest.raises(ag.ShapeError):
        agents.score_images(g, np.zeros((2, 4)))


def test_score_images_target_self_similarity():
    rng = np.random.default_rng(6)
    f_t = rng.normal(size=5)
    f_t /= np.linalg.norm(f_t)
    base = rng.normal(size=5)
    orth = base - (base @ f_t) * f_t
    orth *= 0.5 / np.linalg.norm(orth)
    scores = agents.score_images(f_t, np.stack([f_t, orth, -orth]))
    assert np.argmax(scores.data) == 0
    assert scores.data[0] > max(scores.data[1], scores.data[2])


def test_image_probabilities_normalize():
    import refgame.game as game
    p = game.image_probabilities(np.array([0.3, -1.2, 2.0, 0.0]))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


def test_lm_log_prob_uniform_model():
    vocab = agents.Vocabulary(4, 3)
    lm = agents.LanguageModel.create(np.random.default_rng(0), vocab, 5, 6)
    zero_params(lm)
    for msg in ([vocab.eos], [0, vocab.eos], [1, 2, 3]):
        lp = agents.lm_log_prob(lm, msg).item()
        assert abs(lp - (-len(msg) * np.log(vocab.n_outcomes))) < 1e-12


def test_lm_log_prob_monotone_in_length():
    vocab = agents.Vocabulary(4, 6)
    lm = agents.LanguageModel.create(np.random.default_rng(2), vocab, 5, 6)
    msg = [1, 3, 0, 2]
    for n in range(1, len(msg)):
        assert (agents.lm_log_prob(lm, msg[:n + 1]).item()
                < agents.lm_log_prob(lm, msg[:n]).item())


def test_lm_log_prob_rejects_out_of_vocabulary():
    vocab = agents.Vocabulary(3, 4)
    lm = agents.LanguageModel.create(np.random.default_rng(3), vocab, 5, 6)
    with pytest.raises(ValueError):
        agents.lm_log_prob(lm, [0, vocab.start])
    with pytest.raises(ValueError):
        agents.lm_log_prob(lm, [7])


def test_lm_message_space_sums_to_one():
    """|V|=3, L=3: exp(lm_log_prob) summed over all 40 possible messages
    must equal 1 (the generation tree is exhaustive)."""
    vocab = agents.Vocabulary(3, 3)
    lm = agents.LanguageModel.create(np.random.default_rng(4), vocab, 5, 6)
    msgs = enumerate_messages(vocab)
    assert len(msgs) == 40
    total = sum(np.exp(agents.lm_log_prob(lm, m).item()) for m in msgs)
    assert abs(total - 1.0) < 1e-9


def test_lm_train_memorizes_single_message():
    vocab = agents.Vocabulary(4, 4)
    lm = agents.LanguageModel.create(np.random.default_rng(5), vocab, 8, 16)
    corpus = [[2, 0, 1, vocab.eos]] * 8
    ppl = agents.lm_train(lm, corpus, 150, np.random.default_rng(6), lr=0.05)
    assert ppl < 1.1
    assert ppl >= 1.0


def test_lm_train_beats_uniform_on_held_out():
    """Corpus with shared structure (every message starts with token 0):
    held-out perplexity after training < uniform |V|+1."""
    vocab = agents.Vocabulary(5, 4)
    lm = agents.LanguageModel.create(np.random.default_rng(7), vocab, 8, 16)
    rng = np.random.default_rng(8)
    corpus = [[0, int(rng.integers(1, 5)), vocab.eos] for _ in range(40)]
    held_out = [[0, int(rng.integers(1, 5)), vocab.eos] for _ in range(20)]
    agents.lm_train(lm, corpus, 60, np.random.default_rng(9), lr=0.02)
    assert agents.lm_perplexity(lm, held_out) < vocab.n_outcomes


def test_lm_train_rejects_empty_corpus():
    vocab = agents.Vocabulary(3, 3)
    lm = agents.LanguageModel.create(np.random.default_rng(1), vocab, 4, 5)
    with pytest.raises(ValueError):
        agents.lm_train(lm, [], 1, np.random.default_rng(0))


def test_batched_rollout_matches_single_generate():
    """Batched generation with per-column noise equals one-at-a-time
    generation with the same noise columns."""
    s = make_sender(seed=17, vocab_size=5, max_len=4)
    rng = np.random.default_rng(31)
    feats = rng.normal(size=(6, 4))
    noise = smp.gumbel_noise(smp.stream(3, smp.DOMAIN_GUMBEL, 9),
                             (4, 6, s.vocab.n_outcomes))
    roll = agents.generate_batch(s, feats, "sample", noise=noise)
    for j in range(6):
        m = agents.sender_generate(s, feats[j], "sample",
                                   noise=noise[:, j, :])
        length = int(roll.lengths[j])
        assert m.tokens == [int(t) for t in roll.tokens[:length, j]]


def test_generate_batch_rejects_bad_mode_and_dims():
    s = make_sender()
    with pytest.raises(ValueError):
        agents.generate_batch(s, np.zeros((2, 4)), "beam")
    with pytest.raises(ag.ShapeError):
        agents.generate_batch(s, np.zeros((2, 3)), "sample",
                              rng=np.random.default_rng(0))
