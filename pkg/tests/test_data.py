import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from issueframe.data import (DOMAIN, FRAMES, QUALITY, Batch, FrameLabel, Instance, TaskDataset, batches,
                             distribution_report, expand_multilabel, load_corpus, sample_path, save_corpus)
from issueframe.errors import ConfigError, EmptyDatasetError, LabelError, ParseError
from issueframe.numcore import make_rng
from issueframe.synth import SynthSpec, synth_generate


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def inst(i, labels=(5,), tokens=("a", "b")):
    return Instance(f"i{i}", " ".join(tokens), tuple(tokens), tuple(labels))


class TestFrameLabel:
    def test_bijection(self):
        names = {FrameLabel.from_code(c).name for c in FRAMES.labels}
        assert len(names) == 5
        for c in FRAMES.labels:
            assert FrameLabel.from_name(FrameLabel.from_code(c).name).code == c
        assert FrameLabel.from_code(13).name == "Political"
        assert FrameLabel.from_code(1).name == "Economic"

    def test_unknown(self):
        with pytest.raises(LabelError):
            FrameLabel.from_code(2)


class TestLoadCorpus:
    def test_sample_counts_match_table(self):
        ds = load_corpus(sample_path(), FRAMES)
        assert len(ds) == 692
        assert ds.class_counts() == {1: 78, 5: 234, 6: 166, 7: 186, 13: 96}
        assert ds.multi_label_count() == 67

    def test_report_layout(self):
        report = distribution_report(load_corpus(sample_path(), FRAMES))
        header, row = report.splitlines()
        assert header.split()[-7:] == ["1", "13", "5", "6", "7", "#", "multi"]
        assert row.split()[1:] == ["692", "78", "96", "234", "166", "186", "67"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.raises(EmptyDatasetError):
            load_corpus(p)

    def test_multi_label_line(self, tmp_path):
        p = write_jsonl(tmp_path / "c.jsonl", [{"id": "x", "text": "t", "labels": [5, 7],
                                                "domain": "news", "split": "train"}])
        ds = load_corpus(p)
        assert len(ds) == 1 and set(ds.instances[0].labels) == {5, 7}

    def test_parse_error_has_line_number(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text(json.dumps({"id": "a", "text": "x y", "labels": [1]}) + "\n{not json\n")
        with pytest.raises(ParseError, match=":2:"):
            load_corpus(p)

    def test_label_outside_set(self, tmp_path):
        p = write_jsonl(tmp_path / "c.jsonl", [{"id": "a", "text": "x", "labels": [2]}])
        with pytest.raises(LabelError):
            load_corpus(p)

    def test_string_labels(self, tmp_path):
        p = write_jsonl(tmp_path / "c.jsonl", [{"id": "a", "text": "x", "labels": ["target"]},
                                               {"id": "b", "text": "y", "labels": ["Economic"]}])
        assert load_corpus(p, DOMAIN.__class__("d", ("target", "Economic"))).instances[0].labels == ("target",)
        p2 = write_jsonl(tmp_path / "d.jsonl", [{"id": "b", "text": "y", "labels": ["Economic", "13"]}])
        assert load_corpus(p2, FRAMES).instances[0].labels == (1, 13)

    def test_empty_tokens_rejected(self, tmp_path):
        p = write_jsonl(tmp_path / "c.jsonl", [{"id": "a", "text": "   ", "labels": [1]}])
        with pytest.raises(ParseError):
            load_corpus(p)

    def test_unlabeled(self, tmp_path):
        p = write_jsonl(tmp_path / "u.jsonl", [{"id": "a", "text": "x", "labels": []}])
        assert load_corpus(p, None).instances[0].labels == ()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.text(min_size=1, max_size=12).filter(lambda s: s.strip()),
                              st.lists(st.sampled_from(FRAMES.labels), min_size=1, max_size=3, unique=True),
                              st.sampled_from(["news", "twitter", "online_disc"]),
                              st.sampled_from(["train", "dev", "test"])), min_size=1, max_size=10))
    def test_round_trip(self, tmp_path_factory, rows):
        from issueframe.preprocess import tokenize
        insts = []
        for k, (text, labels, domain, split) in enumerate(rows):
            toks = tokenize(text) or ["x"]
            insts.append(Instance(f"id{k}", text, tuple(toks), tuple(labels), domain, split))
        ds = TaskDataset("rt", FRAMES, tuple(insts))
        p = tmp_path_factory.mktemp("rt") / "rt.jsonl"
        save_corpus(ds, p)
        assert load_corpus(p, FRAMES, name="rt") == ds


class TestExpandMultilabel:
    def test_split_into_copies(self):
        ds = TaskDataset("d", FRAMES, (inst(0, (5, 7)),))
        out = expand_multilabel(ds)
        assert [i.labels for i in out] == [(5,), (7,)]
        assert {i.id for i in out} == {"i0"}

    def test_single_label_identity(self):
        ds = TaskDataset("d", FRAMES, tuple(inst(k, (1,)) for k in range(4)))
        assert expand_multilabel(ds) == ds

    def test_online_disc_sample_total(self):
        ds = load_corpus(sample_path(), FRAMES)
        out = expand_multilabel(ds)
        assert len(out) == 78 + 96 + 234 + 166 + 186 == 760
        assert all(len(i.labels) == 1 for i in out)

    @given(st.lists(st.lists(st.sampled_from(FRAMES.labels), min_size=1, max_size=5, unique=True), max_size=20))
    def test_preserves_id_label_multiset(self, label_lists):
        ds = TaskDataset("d", FRAMES, tuple(inst(k, tuple(ls)) for k, ls in enumerate(label_lists)))
        before = Counter((i.id, l) for i in ds for l in i.labels)
        after = Counter((i.id, l) for i in expand_multilabel(ds) for l in i.labels)
        assert before == after


class TestBatches:
    ds = TaskDataset("d", FRAMES, tuple(inst(k) for k in range(300)))

    def test_sizes(self):
        assert [len(b) for b in batches(self.ds, 128, make_rng(1))] == [128, 128, 44]

    def test_singletons(self):
        out = batches(self.ds, 1, make_rng(1))
        assert len(out) == 300 and all(len(b) == 1 for b in out)

    def test_each_instance_once(self):
        ids = [i.id for b in batches(self.ds, 128, make_rng(2)) for i in b.instances]
        assert sorted(ids) == sorted(i.id for i in self.ds)

    def test_deterministic(self):
        a = [[i.id for i in b.instances] for b in batches(self.ds, 128, make_rng(5))]
        b = [[i.id for i in b.instances] for b in batches(self.ds, 128, make_rng(5))]
        assert a == b

    def test_lengths(self):
        b = batches(TaskDataset("d", FRAMES, (inst(0, tokens=("a",)), inst(1, tokens=("a", "b", "c")))), 2)[0]
        assert b.lengths == (1, 3) and b.max_len == 3


class TestSynth:
    def test_no_shift_same_distribution(self):
        spec = SynthSpec(shift=0.0, per_class_count=50, target_per_class=0, unlabeled_count=0)
        c = synth_generate(spec, make_rng(1))
        assert not any("_m" in t for i in c.source for t in i.tokens)

    def test_full_shift_markers_everywhere(self):
        spec = SynthSpec(shift=1.0, per_class_count=200, target_per_class=40, unlabeled_count=50)
        c = synth_generate(spec, make_rng(1))
        assert all(any(t.startswith("tgt_m") for t in i.tokens) for i in c.target)
        assert all(any(t.startswith("tgt_m") for t in i.tokens) for i in c.unlabeled)

    def test_counts_and_lengths(self):
        spec = SynthSpec(per_class_count=30, target_per_class=6, unlabeled_count=17)
        c = synth_generate(spec, make_rng(3))
        assert set(c.source.class_counts().values()) == {30}
        assert set(c.target.class_counts().values()) == {6}
        assert len(c.unlabeled) == 17
        assert all(5 <= len(i.tokens) <= 20 for i in c.source)

    def test_deterministic(self):
        spec = SynthSpec(per_class_count=10)
        assert synth_generate(spec, make_rng(9)) == synth_generate(spec, make_rng(9))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthSpec(classes=0))

    def test_centroid_similarity_falls_with_shift(self):
        def centroid(ds, c, vocab):
            v = np.zeros(len(vocab))
            for i in ds:
                if i.labels == (c,):
                    for t in i.tokens:
                        v[vocab[t]] += 1
            return v

        sims = []
        for shift in (0.0, 0.3, 0.6, 0.9):
            c = synth_generate(SynthSpec(shift=shift, per_class_count=200, target_per_class=200,
                                         unlabeled_count=0), make_rng(4))
            vocab = {w: k for k, w in enumerate(c.words)}
            per_class = []
            for lab in c.source.label_set.labels:
                a, b = centroid(c.source, lab, vocab), centroid(c.target, lab, vocab)
                per_class.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
            sims.append(np.mean(per_class))
        assert all(x > y for x, y in zip(sims, sims[1:])), sims
