import itertools

import numpy as np
import pytest

from rlqfs import decode as dc
from rlqfs import ndgrad as nd
from rlqfs.corpus import BOS, EOS
from rlqfs.decode import GenConfig, Trajectory, beam_search, count_decode_cost, greedy_decode, gumbel_softmax, sample_decode, two_pass_decode
from rlqfs.errors import ContractError
from rlqfs.model import ModelConfig, Seq2SeqModel
from rlqfs.ndgrad import Tensor

from conftest import assert_grads_close, numeric_grad


def small_model(seed=0, vocab=10, max_positions=24):
    cfg = ModelConfig(
        vocab_size=vocab,
        d_model=8,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        ffn_dim=16,
        max_positions=max_positions,
    )
    return Seq2SeqModel(cfg, np.random.default_rng(seed))


SRC = [BOS, 7, 8, 9, EOS]


class TestGenConfig:
    def test_paper_preset(self):
        g = GenConfig.paper()
        assert (g.beam_size, g.min_tokens, g.max_tokens) == (15, 64, 256)

    def test_validation(self):
        with pytest.raises(ContractError):
            GenConfig(min_tokens=5, max_tokens=4)
        with pytest.raises(ContractError):
            GenConfig(beam_size=0)
        with pytest.raises(ContractError):
            GenConfig(gumbel_temperature=0.0)


class TestGreedy:
    def test_min_tokens_blocks_eos(self):
        model = small_model(3)
        gen = GenConfig(min_tokens=3, max_tokens=6)
        for seed in range(5):
            traj = greedy_decode(small_model(seed), SRC, gen)
            assert EOS not in traj.token_ids[:2]
            traj.validate()

    def test_deterministic(self):
        model = small_model(1)
        gen = GenConfig(min_tokens=2, max_tokens=8)
        a = greedy_decode(model, SRC, gen)
        b = greedy_decode(model, SRC, gen)
        assert a.token_ids == b.token_ids
        assert a.terminated_by == b.terminated_by

    def test_length_bounds(self):
        gen = GenConfig(min_tokens=3, max_tokens=7)
        for seed in range(8):
            traj = greedy_decode(small_model(seed), SRC, gen)
            assert 3 <= len(traj.token_ids) <= 7

    def test_equals_beam_one_on_many_random_models(self):
        gen = GenConfig(beam_size=1, min_tokens=2, max_tokens=6)
        for seed in range(50):
            model = small_model(seed)
            src = [BOS, 7 + (seed % 3), 8, EOS]
            greedy = greedy_decode(model, src, gen)
            beam = beam_search(model, src, gen)
            assert beam == greedy.token_ids, f"seed {seed}"

    def test_no_tape(self):
        traj = greedy_decode(small_model(0), SRC, GenConfig(min_tokens=2, max_tokens=5))
        assert all(lp._parents == () for lp in traj.step_logprobs)


class TestSampleDecode:
    def test_respects_min_tokens(self):
        gen = GenConfig(min_tokens=4, max_tokens=8)
        rng = np.random.default_rng(0)
        for seed in range(5):
            traj = sample_decode(small_model(seed), SRC, gen, rng)
            assert EOS not in traj.token_ids[:3]
            traj.validate()

    def test_temperature_zero_equals_greedy(self):
        model = small_model(2)
        gen = GenConfig(min_tokens=2, max_tokens=6)
        greedy = greedy_decode(model, SRC, gen)
        argmax = sample_decode(model, SRC, gen, np.random.default_rng(0), temperature=0.0)
        assert argmax.token_ids == greedy.token_ids

    def test_first_token_frequency_matches_softmax(self):
        # min_tokens=1 so no mask distorts the first-step distribution.
        # 20k end-to-end draws keep this test fast; at this sample size the
        # expected total variation for a 10-way categorical is ~0.009, so the
        # 0.02 bound still has >3 sigma of slack.
        model = small_model(4)
        gen = GenConfig(min_tokens=1, max_tokens=1)
        rng = np.random.default_rng(9)
        with nd.no_grad():
            memory, keep = dc._encode(model, SRC)
            row = dc._last_row_logprobs(model, [BOS], memory, keep)
        probs = np.exp(row)
        draws = 20_000
        counts = np.zeros(model.cfg.vocab_size)
        for _ in range(draws):
            traj = sample_decode(model, SRC, gen, rng)
            counts[traj.token_ids[0]] += 1
        tv = 0.5 * np.abs(counts / draws - probs).sum()
        assert tv <= 0.02, f"total variation {tv:.4f}"


class TestGumbelSoftmax:
    def test_weights_simplex(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal(9))
        for _ in range(50):
            w = gumbel_softmax(logits, 0.7, rng)
            assert abs(w.data.sum() - 1.0) <= 1e-12
            assert (w.data >= 0).all()

    def test_low_temperature_one_hot(self):
        rng = np.random.default_rng(1)
        logits = Tensor(np.array([0.5, -0.2, 1.5, 0.0]))
        w = gumbel_softmax(logits, 1e-6, rng)
        top = w.data.argmax()
        assert w.data[top] == pytest.approx(1.0, abs=1e-9)
        assert w.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_argmax_frequency_matches_softmax(self):
        logits_np = np.array([1.0, 0.2, -0.5, 0.9, -1.3])
        probs = np.exp(logits_np) / np.exp(logits_np).sum()
        rng = np.random.default_rng(7)
        logits = Tensor(logits_np)
        draws = 100_000
        counts = np.zeros(5)
        with nd.no_grad():
            for _ in range(draws):
                counts[gumbel_softmax(logits, 1.0, rng).data.argmax()] += 1
        tv = 0.5 * np.abs(counts / draws - probs).sum()
        assert tv <= 0.02, f"total variation {tv:.4f}"

    def test_gradient_at_fixed_noise(self):
        x0 = np.array([0.3, -1.0, 0.8, 0.1])
        w_vec = np.array([0.5, -0.25, 1.0, 0.75])
        temp = 0.9

        def f(x):
            rng = np.random.default_rng(42)
            with nd.no_grad():
                return float((gumbel_softmax(Tensor(x), temp, rng).data * w_vec).sum())

        x = Tensor(x0, requires_grad=True)
        out = gumbel_softmax(x, temp, np.random.default_rng(42))
        nd.backward(nd.tsum(nd.mul(out, w_vec)))
        assert_grads_close(x.grad, numeric_grad(f, x0.copy()), tol=1e-5)


class TestTwoPass:
    def test_mix_zero_reproduces_teacher_forcing(self):
        model = small_model(5)
        gold = [7, 8, 9, 8, EOS]
        gen = GenConfig(sampling_mix_prob=0.0)
        rng = np.random.default_rng(0)
        pass1, traj, described = two_pass_decode(model, SRC, gold, gen, rng)
        memory = model.encode(SRC)
        tf_logits = model.decoder_forward([BOS] + gold[:-1], memory, memory_pad_mask=np.array([True] * 5))
        assert np.abs(pass1.data - tf_logits.data).max() <= 1e-9
        assert described[0] == "bos"
        assert all(d == "gold" for d in described[1:])

    def test_pass2_logits_equal_pass1_under_mix_zero(self):
        # with gold inputs, pass 2 recomputes exactly the pass-1 logits, so
        # the trajectory's step log-probs must match pass-1 log-softmax rows
        model = small_model(6)
        gold = [9, 7, 8, EOS]
        gen = GenConfig(sampling_mix_prob=0.0)
        result = two_pass_decode(model, SRC, gold, gen, np.random.default_rng(3))
        pass1, traj, _ = result
        assert np.abs(result.pass2_logits.data - pass1.data).max() <= 1e-9
        logp1 = nd.log_softmax(pass1, axis=-1).data
        for t, (tok, lp) in enumerate(zip(traj.token_ids, traj.step_logprobs)):
            assert lp.item() == pytest.approx(logp1[t, tok], abs=1e-9)

    def test_low_temp_full_mix_feeds_sampled_embeddings(self):
        model = small_model(7)
        gold = [7, 9, 8, 7, EOS]
        gen = GenConfig(sampling_mix_prob=1.0, gumbel_temperature=1e-8)
        rng = np.random.default_rng(11)
        pass1, traj, described = two_pass_decode(model, SRC, gold, gen, rng)
        assert described[0] == "bos" and all(d == "mixture" for d in described[1:])
        # replicate the decode's own draws to recover the sampled prefix
        rng2 = np.random.default_rng(11)
        model2 = small_model(7)
        memory = model2.encode(SRC, train=False, rng=rng2)
        logits = model2.decoder_forward([BOS] + gold[:-1], memory, memory_pad_mask=np.array([True] * 5))
        sampled = []
        for t in range(len(gold)):
            g = rng2.gumbel(size=model2.cfg.vocab_size)
            sampled.append(int((logits.data[t] + g).argmax()))
        horizon = len(traj.token_ids)
        assert sampled[:horizon] == traj.token_ids

    def test_trajectory_truncates_at_sampled_eos(self):
        gen = GenConfig(sampling_mix_prob=1.0, gumbel_temperature=2.0)
        found_eos = False
        for seed in range(40):
            traj = two_pass_decode(
                small_model(seed % 4), SRC, [7, 8, 9, 7, 8, 9], gen, np.random.default_rng(seed)
            ).trajectory
            traj.validate()
            if traj.terminated_by == dc.EOS_TERMINATED:
                found_eos = True
                assert traj.token_ids[-1] == EOS
                assert EOS not in traj.token_ids[:-1]
            else:
                assert len(traj.token_ids) == 6
        assert found_eos, "no sampled EOS in 40 seeds; test model too confident"

    def test_gradients_reach_pass_one(self):
        model = small_model(8)
        gold = [7, 8, 9, EOS]
        gen = GenConfig(sampling_mix_prob=1.0)
        pass1, traj, _ = two_pass_decode(model, SRC, gold, gen, np.random.default_rng(1))
        loss = traj.logprob_sum()

        def ancestors(t):
            seen, stack = set(), [t]
            while stack:
                node = stack.pop()
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.extend(node._parents)
            return seen

        assert id(pass1) in ancestors(loss)
        for p in model.params.values():
            p.zero_grad()
        nd.backward(loss)
        grads = {k: float(np.abs(p.grad).max()) for k, p in model.params.items()}
        assert grads["token_embedding"] > 0
        assert grads["enc.0.attn.wq.w"] > 0

    def test_mix_zero_pass_one_not_an_ancestor(self):
        model = small_model(8)
        pass1, traj, _ = two_pass_decode(
            model, SRC, [7, 8, 9, EOS], GenConfig(sampling_mix_prob=0.0), np.random.default_rng(1)
        )
        loss = traj.logprob_sum()
        seen, stack = set(), [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.extend(node._parents)
        assert id(pass1) not in seen

    def test_empty_gold_rejected(self):
        with pytest.raises(ContractError):
            two_pass_decode(small_model(0), SRC, [], GenConfig(), np.random.default_rng(0))


class TestBeamSearch:
    def test_length_window(self):
        gen = GenConfig(beam_size=3, min_tokens=3, max_tokens=6)
        for seed in range(6):
            out = beam_search(small_model(seed), SRC, gen)
            assert 3 <= len(out) <= 6
            if EOS in out:
                assert out.index(EOS) == len(out) - 1

    def test_matches_exhaustive_enumeration(self):
        model = small_model(13, vocab=8)
        gen = GenConfig(beam_size=512, min_tokens=1, max_tokens=4, length_norm_exponent=0.75)
        src = [BOS, 7, EOS]

        with nd.no_grad():
            memory, keep = dc._encode(model, src)

            def score(seq):
                logits = model.decoder_forward([BOS] + list(seq[:-1]), memory, memory_pad_mask=keep)
                logp = nd.log_softmax(logits, axis=-1).data
                cum = sum(logp[t, tok] for t, tok in enumerate(seq))
                return cum / len(seq) ** gen.length_norm_exponent

            non_eos = [v for v in range(8) if v != EOS]
            candidates = []
            for length in range(1, 5):
                for body in itertools.product(non_eos, repeat=length - 1):
                    candidates.append(body + (EOS,))  # ends by EOS
                if length == 4:
                    for body in itertools.product(non_eos, repeat=4):
                        candidates.append(body)  # ends by max length
            best = max(candidates, key=score)
            best_score = score(best)

        got = tuple(beam_search(model, src, gen))
        assert score(got) == pytest.approx(best_score, abs=1e-12), (got, best)

    def test_beam_score_at_least_greedy(self):
        gen = GenConfig(beam_size=4, min_tokens=2, max_tokens=8)
        for seed in range(20):
            model = small_model(seed)
            out = beam_search(model, SRC, gen)
            greedy = greedy_decode(model, SRC, gen)
            with nd.no_grad():
                memory, keep = dc._encode(model, SRC)

                def score(seq):
                    logits = model.decoder_forward([BOS] + list(seq[:-1]), memory, memory_pad_mask=keep)
                    logp = nd.log_softmax(logits, axis=-1).data
                    cum = sum(logp[t, tok] for t, tok in enumerate(seq))
                    return cum / len(seq) ** gen.length_norm_exponent

                assert score(tuple(out)) >= score(tuple(greedy.token_ids)) - 1e-12


class TestDecodeCost:
    def test_two_pass_doubles_single_pass(self):
        model = dc._bench_model(70)
        for n in (4, 16, 64):
            two = count_decode_cost(dc.TWO_PASS, n, model)
            single = n * n * model.cfg.n_heads * model.cfg.n_dec_layers
            assert two == 2 * single

    def test_sequential_counts_sum_of_squares(self):
        model = dc._bench_model(40)
        for n in (3, 10, 32):
            got = count_decode_cost(dc.SEQUENTIAL, n, model)
            expect = sum(t * t for t in range(1, n + 1)) * model.cfg.n_heads * model.cfg.n_dec_layers
            assert got == expect

    def test_cubic_ratio_trend(self):
        model = dc._bench_model(300)
        r64 = count_decode_cost(dc.SEQUENTIAL, 64, model) / count_decode_cost(dc.SEQUENTIAL, 128, model)
        r128 = count_decode_cost(dc.SEQUENTIAL, 128, model) / count_decode_cost(dc.SEQUENTIAL, 256, model)
        assert abs(r128 - 0.125) < abs(r64 - 0.125) or abs(r128 - 0.125) < 0.01
        assert r128 == pytest.approx(0.125, abs=0.01)

    def test_loglog_slopes(self):
        lengths = [16, 32, 64, 128]
        model = dc._bench_model(140)
        seq = [count_decode_cost(dc.SEQUENTIAL, n, model) for n in lengths]
        two = [count_decode_cost(dc.TWO_PASS, n, model) for n in lengths]
        seq_slope = np.polyfit(np.log(lengths), np.log(seq), 1)[0]
        two_slope = np.polyfit(np.log(lengths), np.log(two), 1)[0]
        assert abs(seq_slope - 3.0) <= 0.3
        assert abs(two_slope - 2.0) <= 0.3


class TestTrajectoryInvariants:
    def test_every_mode_yields_valid_trajectories(self):
        gen = GenConfig(min_tokens=2, max_tokens=6)
        for seed in range(10):
            model = small_model(seed % 3)
            rng = np.random.default_rng(seed)
            greedy_decode(model, SRC, gen).validate()
            sample_decode(model, SRC, gen, rng).validate()
            two_pass_decode(model, SRC, [7, 8, EOS], gen, rng).trajectory.validate()

    def test_validate_rejects_inconsistencies(self):
        with pytest.raises(ContractError):
            Trajectory([7, 8], [Tensor(-0.5)], dc.MAX_TERMINATED).validate()
        with pytest.raises(ContractError):
            Trajectory([7, EOS], [Tensor(-0.5), Tensor(-0.1)], dc.MAX_TERMINATED).validate()
        with pytest.raises(ContractError):
            Trajectory([7], [Tensor(0.5)], dc.MAX_TERMINATED).validate()
