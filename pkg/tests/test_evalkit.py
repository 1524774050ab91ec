import itertools
import logging
import math

import numpy as np
import pandas as pd
import pytest

from conftest import TINY_TRAIN, make_stream
from engine.corpus import ground_truth
from engine.evalkit import (
    OracleEmbedder, ablation_grid, apply_cell, candidate_selection, cell_id, evaluate, grid_cells,
    linear_probe, localize_steps, median_rows, pooled_retrieval, probe_split, rank_of_truth, retrieval_eval,
    truth_rows,
)
from engine.trainer import initial_checkpoint, train
from extensions import logger
from models import EvalConfig, RunConfig, TrainConfig

EVAL = EvalConfig(pool_streams=5, probe_max_iter=300)


def tiny_run():
    return RunConfig(train=TrainConfig(**TINY_TRAIN), eval=EVAL)


class RandomEmbedder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def __call__(self, streams):
        clips = sum(len(s) for s in streams)
        narrations = sum(1 for s in streams for seg in s.segments if not seg.is_irrelevant)
        return self.rng.standard_normal((clips, 4)), self.rng.standard_normal((narrations, 4))


class TestRetrieval:
    def test_perfect(self):
        res = retrieval_eval([[0.9, 0.1], [0.2, 0.8]], [0, 1], ks=(1,))
        assert res.recall_at_k == {1: 1.0}
        assert res.median_rank == 1.0

    def test_swapped(self):
        res = retrieval_eval([[0.1, 0.9], [0.8, 0.2]], [0, 1], ks=(1, 2))
        assert res.recall_at_k == {1: 0.0, 2: 1.0}
        assert res.median_rank == 2.0

    def test_dominant_diagonal(self):
        res = retrieval_eval(np.eye(3) * 10.0, [0, 1, 2], ks=(1,))
        assert res.recall_at_k[1] == 1.0 and res.median_rank == 1.0

    def test_constant_scores_rank_first(self):
        assert retrieval_eval(np.ones((4, 4)), [0, 1, 2, 3], ks=(1,)).recall_at_k[1] == 1.0

    def test_anti_diagonal(self):
        S = [[1.0, 2.0, 3.0], [0.0, 5.0, 0.0], [3.0, 2.0, 1.0]]
        assert rank_of_truth(S, [0, 1, 2]).tolist() == [3, 1, 3]
        assert retrieval_eval(S, [0, 1, 2]).median_rank == 3.0

    def test_every_ordering_of_five_items(self):
        for order in itertools.permutations(range(5)):
            scores = np.array(order, dtype=float)
            position = list(np.argsort(-scores)).index(2) + 1
            assert rank_of_truth([scores], [2]).tolist() == [position]

    def test_even_query_count_median(self):
        S = [[1.0, 0.0], [1.0, 0.0]]
        assert retrieval_eval(S, [0, 1]).median_rank == 1.5

    def test_ties_go_to_truth(self):
        assert rank_of_truth([[0.5, 0.5, 0.5]], [2]).tolist() == [1]

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            S = rng.integers(0, 4, size=(5, 5)).astype(float)
            gt = rng.integers(0, 5, size=5)
            expected = [1 + sum(1 for j in range(5) if S[q, j] > S[q, gt[q]]) for q in range(5)]
            assert rank_of_truth(S, gt).tolist() == expected

    def test_ranks_are_bounded(self, rng):
        S = rng.standard_normal((7, 11))
        ranks = rank_of_truth(S, rng.integers(0, 11, size=7))
        assert np.all((ranks >= 1) & (ranks <= 11))

    def test_recall_monotone_in_k(self, rng):
        res = retrieval_eval(rng.standard_normal((30, 30)), np.arange(30), ks=(1, 5, 10, 30))
        values = [res.recall_at_k[k] for k in (1, 5, 10, 30)]
        assert values == sorted(values) and values[-1] == 1.0

    @pytest.mark.parametrize('gt', [[0, 2], [-1, 0], [0]])
    def test_bad_ground_truth(self, gt):
        with pytest.raises(ValueError):
            rank_of_truth(np.zeros((2, 2)), gt)

    def test_oracle_pools(self, tiny_corpus):
        t2v, v2t = pooled_retrieval(tiny_corpus.held_out_streams(), OracleEmbedder(), ks=(1,), pool_streams=3)
        assert t2v.recall_at_k[1] == 1.0 and v2t.recall_at_k[1] == 1.0
        assert t2v.ranks.size == v2t.ranks.size

    def test_no_relevant_narrations(self):
        stream = make_stream([0, 1, 2])
        for seg in stream.segments:
            seg.is_irrelevant = True
            seg.aligned_index = None
        t2v, v2t = pooled_retrieval([stream], OracleEmbedder(), ks=(1, 5))
        assert t2v.ranks.size == 0 and v2t.ranks.size == 0
        assert all(math.isnan(v) for v in t2v.recall_at_k.values())
        assert t2v.to_dict() == {'R@1': None, 'R@5': None, 'MedR': None}


class TestLocalization:
    def test_oracle(self, tiny_corpus):
        assert localize_steps(tiny_corpus, OracleEmbedder()) == 1.0

    def test_random_is_near_chance(self, tiny_corpus):
        recall = localize_steps(tiny_corpus, RandomEmbedder(0), streams=tiny_corpus.streams)
        assert abs(recall - 1.0 / 8) < 0.07

    def test_streams_without_relevant_narrations_skipped(self, tiny_corpus):
        silent = make_stream([0, 1, 2], stream_id=1)
        for seg in silent.segments:
            seg.is_irrelevant = True
            seg.aligned_index = None
        good = make_stream([0, 1, 2], stream_id=2)
        assert localize_steps(tiny_corpus, OracleEmbedder(), streams=[silent, good]) == 1.0
        assert localize_steps(tiny_corpus, OracleEmbedder(), streams=[silent]) == 0.0

    def test_truth_rows_follow_ground_truth(self, tiny_corpus):
        streams = tiny_corpus.held_out_streams()
        truth = ground_truth(tiny_corpus)
        expected, offset = [], 0
        for stream in streams:
            matches = [truth[(stream.id, j)].match_index for j in range(len(stream))]
            expected.extend(offset + m for m in matches if m is not None)
            offset += len(stream)
        assert truth_rows(streams).tolist() == expected


class AntiOracleEmbedder:
    """Ground-truth pairs score lowest"""

    def __call__(self, streams):
        F = np.eye(sum(len(stream) for stream in streams))
        return F, -F[truth_rows(streams)]


def silent_stream(stream_id):
    stream = make_stream([0, 1, 2], stream_id=stream_id)
    for seg in stream.segments:
        seg.is_irrelevant = True
        seg.aligned_index = None
    return stream


class TestCandidateSelection:
    def test_oracle(self, tiny_corpus):
        assert candidate_selection(tiny_corpus, OracleEmbedder(), K=5) == 1.0

    def test_single_candidate_is_always_right(self, tiny_corpus):
        assert candidate_selection(tiny_corpus, RandomEmbedder(0), K=1) == 1.0

    def test_inverted_scores_pick_wrong_candidates(self, tiny_corpus):
        assert candidate_selection(tiny_corpus, AntiOracleEmbedder(), K=5) < 0.2

    def test_random_scores_in_between(self, tiny_corpus):
        selection = candidate_selection(tiny_corpus, RandomEmbedder(1), K=5, streams=tiny_corpus.streams)
        assert 0.1 < selection < 0.7

    def test_bag_capped_by_stream_length(self, tiny_corpus):
        assert candidate_selection(tiny_corpus, OracleEmbedder(), K=9, streams=[make_stream([0, 1, 2])]) == 1.0

    def test_no_relevant_narrations_is_undefined(self, tiny_corpus):
        assert math.isnan(candidate_selection(tiny_corpus, OracleEmbedder(), streams=[silent_stream(1)]))


class TestProbe:
    def test_separable(self):
        labels = np.repeat([0, 1, 2], 20)
        features = np.eye(3)[labels] * 4.0 + np.random.default_rng(0).normal(0, 0.1, (60, 3))
        test_mask = np.tile(np.arange(20) >= 12, 3)
        res = linear_probe(features, labels, test_mask)
        assert res.accuracy == 1.0
        assert res.per_class == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=2000)
        features = rng.standard_normal((2000, 6))
        test_mask = np.arange(2000) >= 1000
        assert abs(linear_probe(features, labels, test_mask, max_iter=500).accuracy - 0.25) < 0.06

    def test_huge_penalty_predicts_majority(self):
        rng = np.random.default_rng(2)
        labels = np.array([0] * 70 + [1] * 30 + [0] * 12 + [1] * 8)
        test_mask = np.arange(120) >= 100
        res = linear_probe(rng.standard_normal((120, 3)), labels, test_mask, l2=1e6)
        assert res.accuracy == pytest.approx(0.6)
        assert res.per_class == {0: 1.0, 1: 0.0}

    def test_accuracy_is_support_weighted(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 3, size=90)
        test_mask = np.arange(90) >= 60
        res = linear_probe(rng.standard_normal((90, 4)), labels, test_mask, max_iter=200)
        weighted = sum(res.per_class[c] * res.support[c] for c in res.per_class) / test_mask.sum()
        assert res.accuracy == pytest.approx(weighted)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            linear_probe(np.ones((4, 2)), [1, 1, 0, 1], [False, False, True, True])

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            linear_probe(np.ones((3, 2)), [0, 1, 0], [False, False, False])

    def test_warns_when_not_converged(self, caplog, monkeypatch):
        monkeypatch.setattr(logger, 'propagate', True)
        labels = np.repeat([0, 1], 10)
        features = np.random.default_rng(4).standard_normal((20, 3))
        with caplog.at_level(logging.WARNING, logger='milnce'):
            linear_probe(features, labels, np.tile([False, True], 10), max_iter=1)
        assert any('did not converge' in r.getMessage() for r in caplog.records)

    def test_converged_fit_is_quiet(self, caplog, monkeypatch):
        monkeypatch.setattr(logger, 'propagate', True)
        labels = np.repeat([0, 1], 10)
        features = np.eye(2)[labels] * 4.0
        with caplog.at_level(logging.WARNING, logger='milnce'):
            linear_probe(features, labels, np.tile([False, True], 10), l2=1.0, tol=1e-3)
        assert not any('did not converge' in r.getMessage() for r in caplog.records)


class TestEvaluate:
    def test_deterministic_and_read_only(self, tiny_train_config, tiny_corpus):
        params = initial_checkpoint(tiny_train_config, tiny_corpus).params
        before = {k: v.copy() for k, v in params.named_arrays().items()}
        first = evaluate(params, tiny_corpus, EVAL)
        second = evaluate(params, tiny_corpus, EVAL)
        assert first == second
        for name, value in params.named_arrays().items():
            np.testing.assert_array_equal(value, before[name])

    def test_report_shape(self, tiny_train_config, tiny_corpus):
        params = initial_checkpoint(tiny_train_config, tiny_corpus).params
        metrics = evaluate(params, tiny_corpus, EVAL)
        assert metrics['held_out_streams'] == 10
        assert set(metrics['text_to_video']) == {'R@1', 'R@5', 'R@10', 'MedR'}
        assert 0.0 <= metrics['localization_recall'] <= 1.0
        assert 0.0 <= metrics['candidate_selection'] <= 1.0
        assert 0.0 <= metrics['probe']['accuracy'] <= 1.0

    def test_oracle_embedder(self, tiny_train_config, tiny_corpus):
        params = initial_checkpoint(tiny_train_config, tiny_corpus).params
        metrics = evaluate(params, tiny_corpus, EVAL, embedder=OracleEmbedder())
        assert metrics['text_to_video']['R@1'] == 1.0
        assert metrics['video_to_text']['MedR'] == 1.0
        assert metrics['localization_recall'] == 1.0
        assert metrics['candidate_selection'] == 1.0

    def test_probe_reads_trunk_by_default(self, tiny_train_config, tiny_corpus):
        params = initial_checkpoint(tiny_train_config, tiny_corpus).params
        features, labels, test_mask = probe_split(tiny_corpus, params, EVAL)
        assert EVAL.probe_features == 'trunk'
        assert features.shape == (80, tiny_train_config.hidden_dim)
        assert labels.shape == test_mask.shape == (80,)


class TestGrid:
    def test_cells_and_ids(self):
        cells = grid_cells({'K': [1, 3], 'loss_kind': ['nce']})
        assert [cell_id(c) for c in cells] == ['K=1,loss_kind=nce', 'K=3,loss_kind=nce']

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError):
            grid_cells({'K': []})

    @pytest.mark.parametrize('cell', [{'seed': 3}, {'learning_rate': 0.1}])
    def test_bad_axes_rejected(self, cell):
        with pytest.raises(ValueError):
            apply_cell(tiny_run(), cell, 0)

    def test_single_cell_matches_direct_run(self, tiny_corpus):
        table = ablation_grid({'K': [3]}, tiny_corpus, seeds=[1], run=tiny_run())
        cfg = apply_cell(tiny_run(), {'K': 3}, 1)
        ckpt, _ = train(cfg.train, tiny_corpus)
        metrics = evaluate(ckpt.params, tiny_corpus, EVAL)
        row = table.iloc[0]
        assert row['t2v_R@1'] == metrics['text_to_video']['R@1']
        assert row['localization'] == metrics['localization_recall']
        assert row['selection'] == metrics['candidate_selection']
        assert row['probe_accuracy'] == metrics['probe']['accuracy']

    def test_rows_and_medians(self, tiny_corpus):
        table = ablation_grid({'K': [1, 3]}, tiny_corpus, seeds=[0, 1], run=tiny_run())
        assert len(table) == 6
        assert table['seed'].tolist() == ['0', '1', '0', '1', 'median', 'median']
        assert table['cell'].tolist()[:4] == ['K=1', 'K=1', 'K=3', 'K=3']
        medians = median_rows(table)
        assert len(medians) == 2
        k1 = table[(table['cell'] == 'K=1') & (table['seed'] != 'median')]
        assert medians.loc[0, 't2v_MedR'] == pytest.approx(k1['t2v_MedR'].median())

    def test_failed_cell_is_reported(self, tiny_corpus):
        axes = {'loss_kind': ['mil-nce', 'cat-nce'], 'bag_side': ['video']}
        table = ablation_grid(axes, tiny_corpus, seeds=[0], run=tiny_run())
        assert table['status'].tolist() == ['ok', 'failed', 'ok', 'failed']
        failed = table.iloc[1]
        assert 'cat-nce' in failed['error']
        assert pd.isna(table.iloc[3]['t2v_R@1'])

    @pytest.mark.slow
    def test_workers_do_not_change_the_table(self, tiny_corpus):
        serial = ablation_grid({'K': [1, 3]}, tiny_corpus, seeds=[0, 1], run=tiny_run())
        parallel = ablation_grid({'K': [1, 3]}, tiny_corpus, seeds=[0, 1], run=tiny_run(), workers=2)
        pd.testing.assert_frame_equal(serial, parallel)
