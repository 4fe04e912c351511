import itertools
import json

import numpy as np
import pytest

from duplexthink.corpus import (
    DataError,
    GenConfig,
    gen_continuation_dialogue,
    gen_dialogue,
    gen_qa_corpus,
    inject_interruption,
    noise_plan,
    read_jsonl,
    record_to_json,
    segment_turns,
    task_answer,
    write_jsonl,
)
from duplexthink.stream import validate
from duplexthink.vocab import TASKS, build_vocabs

V = build_vocabs()


def brute_force_answer(task: str, digits: list[int]) -> list[int]:
    """Independent oracle: literal restatement of each task's definition."""
    if task == "copy":
        return [x for x in digits]
    if task == "rev":
        out = []
        for x in digits:
            out.insert(0, x)
        return out
    if task == "sum":
        total = 0
        for x in digits:
            total += x
        return [total - (total // 10) * 10]
    if task == "max":
        best = digits[0]
        for x in digits[1:]:
            if x > best:
                best = x
        return [best]
    if task == "par":
        odd = False
        for x in digits:
            if x % 2 == 1:
                odd = not odd
        return [1 if odd else 0]
    raise AssertionError(task)


class TestTaskAnswers:
    def test_exhaustive_up_to_length_three(self):
        for task in TASKS:
            for n in (1, 2, 3):
                for digits in itertools.product(range(10), repeat=n):
                    assert task_answer(task, list(digits)) == brute_force_answer(task, list(digits))

    def test_sampled_lengths_up_to_six(self, rng):
        for task in TASKS:
            for _ in range(200):
                n = int(rng.integers(4, 7))
                digits = [int(x) for x in rng.integers(0, 10, size=n)]
                assert task_answer(task, digits) == brute_force_answer(task, digits)

    def test_reference_values(self):
        assert task_answer("sum", [3, 7, 2]) == [2]  # 12 mod 10
        assert task_answer("copy", [5]) == [5]


class TestGenDialogue:
    def test_deterministic_given_seed(self):
        cfg = GenConfig(seed=9)
        a = gen_qa_corpus(cfg, V, 5)
        b = gen_qa_corpus(cfg, V, 5)
        assert [record_to_json(r, V) for r in a] == [record_to_json(r, V) for r in b]

    def test_schema_conformance(self):
        for rec in gen_qa_corpus(GenConfig(), V, 30, base_seed=77):
            assert validate(rec, V.text, V.audio) == []

    def test_rounds_have_consistent_answers(self):
        for rec in gen_qa_corpus(GenConfig(interrupt_prob=0.0), V, 20, base_seed=5):
            assert 1 <= len(rec.events.rounds) <= 4
            for rnd, (bos, eos) in zip(rec.events.rounds, rec.events.turns):
                emitted = []
                for t in range(bos + 1, eos):
                    tok = rec.agent[t]
                    if tok == V.text.PAD_ID:
                        break
                    emitted.append(tok)
                assert emitted == rnd.answer

    def test_query_symbols_on_user_channel(self):
        rec = gen_dialogue(GenConfig(), V, np.random.default_rng(3), seed=3)
        rnd = rec.events.rounds[0]
        assert rec.user[rnd.query_start] in {V.audio.marker_id(t) for t in TASKS}
        assert rec.user[rnd.query_end] == V.audio.query_end_id


class TestSegmentTurns:
    def test_single_sentence_is_one_turn(self):
        assert segment_turns([5], np.random.default_rng(0)) == [[0]]

    def test_force_close_past_word_budget(self):
        # a 250-word sentence always closes its turn immediately
        rng = np.random.default_rng(0)
        for _ in range(50):
            groups = segment_turns([250, 5, 5], rng)
            assert groups[0] == [0]

    def test_single_sentence_rate_near_eighty_percent(self):
        # only the first turn per run is a clean Bernoulli sample: later turns
        # are length-biased by the end of the sentence list (long turns are
        # more likely to be cut off, which would inflate the single rate)
        rng = np.random.default_rng(42)
        singles = 0
        for _ in range(4000):
            first = segment_turns([3] * 16, rng)[0]
            singles += len(first) == 1
        assert singles / 4000 == pytest.approx(0.8, abs=0.02)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            segment_turns([], np.random.default_rng(0))


class TestContinuation:
    def test_schema_conformance(self):
        for i in range(20):
            rec = gen_continuation_dialogue(GenConfig(), V, np.random.default_rng(i), seed=i)
            assert validate(rec, V.text, V.audio) == []
            assert rec.kind == "continuation"

    def test_role_swap_exchanges_content(self):
        cfg = GenConfig()
        plain = gen_continuation_dialogue(cfg, V, np.random.default_rng(8), seed=8)
        swapped = gen_continuation_dialogue(cfg, V, np.random.default_rng(8), seed=8, swap_roles=True)
        assert validate(swapped, V.text, V.audio) == []
        # swapping roles moves the first sentence to the other channel
        plain_first_user = next(s for s in plain.user if s != V.audio.USIL_ID)
        swapped_first_agent = next(t for t in swapped.agent if t != V.text.SIL_ID)
        assert plain_first_user != V.audio.USIL_ID
        assert swapped_first_agent == V.text.BOS_ID

    def test_zero_sentences_rejected(self):
        cfg = GenConfig(sent_count_range=(0, 0))
        with pytest.raises(ValueError):
            gen_continuation_dialogue(cfg, V, np.random.default_rng(0))


def _long_turn_config(**kw):
    # every turn long enough to interrupt
    return GenConfig(pad_long_prob=1.0, pad_long_range=(55, 60), rounds_range=(1, 1), **kw)


class TestInterruption:
    def test_forced_onset_and_delay(self):
        cfg = _long_turn_config()
        rec = gen_dialogue(cfg, V, np.random.default_rng(12), seed=12)
        out = inject_interruption(rec, cfg, V, np.random.default_rng(99), force=True)
        onset = out.events.interruption_onset
        assert onset is not None
        bos, eos = out.events.turns[out.events.interrupted_turn]
        assert out.agent[onset + cfg.interrupt_delay] == V.text.EOS_ID
        assert eos == onset + cfg.interrupt_delay
        # onset sits inside the sampled fraction window of the original span
        orig_bos, orig_eos = rec.events.turns[0]
        span = orig_eos - orig_bos + 1
        assert orig_bos + int(0.2 * span) <= onset <= orig_bos + int(0.8 * span)

    def test_original_tokens_kept_through_delay(self):
        cfg = _long_turn_config()
        rec = gen_dialogue(cfg, V, np.random.default_rng(12), seed=12)
        out = inject_interruption(rec, cfg, V, np.random.default_rng(99), force=True)
        onset = out.events.interruption_onset
        assert out.agent[onset : onset + cfg.interrupt_delay] == rec.agent[onset : onset + cfg.interrupt_delay]

    def test_user_carries_new_query_from_onset(self):
        cfg = _long_turn_config()
        rec = gen_dialogue(cfg, V, np.random.default_rng(12), seed=12)
        out = inject_interruption(rec, cfg, V, np.random.default_rng(99), force=True)
        onset = out.events.interruption_onset
        markers = {V.audio.marker_id(t) for t in TASKS}
        assert out.user[onset] in markers
        # and the interrupting query is answered by an appended turn
        assert len(out.events.turns) == 2
        new_round = out.events.rounds[-1]
        assert new_round.query_start == onset
        assert out.events.turns[-1][0] > new_round.query_end

    def test_result_still_validates(self):
        cfg = _long_turn_config()
        for i in range(30):
            rec = gen_dialogue(cfg, V, np.random.default_rng(i), seed=i)
            out = inject_interruption(rec, cfg, V, np.random.default_rng(1000 + i), force=True)
            assert validate(out, V.text, V.audio) == []
            assert len(out.user) == len(out.agent) == len(out.g)

    def test_short_turns_never_modified(self):
        cfg = GenConfig(pad_long_prob=0.0, interrupt_prob=1.0)
        for i in range(20):
            rec = gen_dialogue(cfg, V, np.random.default_rng(i), seed=i)
            out = inject_interruption(rec, cfg, V, np.random.default_rng(i))
            assert out.events.interruption_onset is None

    def test_trigger_rate_smoke(self):
        # full 10k-sample statistics live in the acceptance suite
        cfg = _long_turn_config(interrupt_prob=0.10)
        hits = 0
        for i in range(600):
            rec = gen_dialogue(cfg, V, np.random.default_rng(i), seed=i)
            out = inject_interruption(rec, cfg, V, np.random.default_rng(50_000 + i))
            hits += out.events.interruption_onset is not None
        assert 0.06 <= hits / 600 <= 0.14


class TestNoise:
    def test_rate_and_range(self):
        cfg = GenConfig()
        rec = gen_dialogue(cfg, V, np.random.default_rng(0), seed=0)
        hits = 0
        for i in range(800):
            out = noise_plan(rec, cfg, np.random.default_rng(i))
            if out.snr_db is not None:
                hits += 1
                assert 0.0 <= out.snr_db <= 60.0
        assert 0.45 <= hits / 800 <= 0.55

    def test_untriggered_leaves_record(self):
        cfg = GenConfig(noise_prob=0.0)
        rec = gen_dialogue(cfg, V, np.random.default_rng(0), seed=0)
        assert noise_plan(rec, cfg, np.random.default_rng(0)).snr_db is None


class TestJsonl:
    def test_roundtrip_identity(self, tmp_path):
        records = gen_qa_corpus(GenConfig(), V, 40, base_seed=21)
        path = tmp_path / "corpus.jsonl"
        write_jsonl(records, str(path), V)
        loaded = read_jsonl(str(path), V)
        assert [record_to_json(r, V) for r in loaded] == [record_to_json(r, V) for r in records]

    def test_interruption_onset_serialized(self, tmp_path):
        cfg = _long_turn_config()
        rec = gen_dialogue(cfg, V, np.random.default_rng(12), seed=12)
        rec = inject_interruption(rec, cfg, V, np.random.default_rng(99), force=True)
        path = tmp_path / "one.jsonl"
        write_jsonl([rec], str(path), V)
        assert json.loads(path.read_text().splitlines()[0])["events"]["interruption_onset"] is not None

    def test_malformed_line_reports_line_number(self, tmp_path):
        records = gen_qa_corpus(GenConfig(), V, 2, base_seed=3)
        path = tmp_path / "bad.jsonl"
        write_jsonl(records, str(path), V)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write('{"user": [1,2,}\n')
        with pytest.raises(DataError, match=":3"):
            read_jsonl(str(path), V)

    def test_missing_file(self):
        with pytest.raises(DataError):
            read_jsonl("/nonexistent/corpus.jsonl", V)
