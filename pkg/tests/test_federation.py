import time

import numpy as np
import pytest

from fedcox.errors import InvalidArgumentError, PrivacyViolationError, RoundFailure
from fedcox.federation.protocol import Message, MessageType
from fedcox.federation.services.CoordinatorService import (
    FederatedCohort,
    aggregate_gradient,
    partition,
)
from fedcox.federation.transport import CommLedger, InProcessTransport, make_transport
from fedcox.survival import gradient

from conftest import make_dataset


class LeakyCenter:
    """Answers every request with its raw covariate rows."""

    def __init__(self, rows):
        self.rows = rows

    def handle(self, request):
        return Message(MessageType.OMEGA_REPLY, request.round, (self.rows,))


class SlowCenter:
    def handle(self, request):
        time.sleep(0.5)
        return Message(MessageType.GRAD_REPLY, request.round, (np.zeros((1, 2)),))


class TestPartition:
    def test_requires_divisible_n(self, signal_data):
        with pytest.raises(InvalidArgumentError, match="remainder 4"):
            partition(signal_data, 7)

    def test_is_deterministic_and_covers_everyone(self, signal_data):
        with partition(signal_data, 4, seed=9) as first, partition(signal_data, 4, seed=9) as second:
            for a, b in zip(first.blocks, second.blocks):
                np.testing.assert_array_equal(a, b)
            assert np.array_equal(np.sort(np.concatenate(first.blocks)), np.arange(signal_data.n))
            assert first.m == 50 and first.n == 200

    def test_global_centering(self, signal_data):
        with partition(signal_data, 4, seed=1, centering="global") as cohort:
            pooled = np.vstack([d.covariates for d in cohort.datasets])
            np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-14)
            # column sums and counts travel up; only the mean comes back down
            assert cohort.ledger.by_type["omega_request"] == 2
            assert cohort.ledger.up_floats == 4 * (cohort.p + 1)
            assert cohort.ledger.down_floats == 2 * 3 + 3 * cohort.p

    def test_global_centering_matches_the_pooled_mean(self, signal_data):
        with partition(signal_data, 4, seed=1) as raw, partition(signal_data, 4, seed=1, centering="global") as centered:
            for before, after in zip(raw.datasets, centered.datasets):
                np.testing.assert_allclose(
                    after.covariates, before.covariates - signal_data.covariates.mean(axis=0), atol=1e-14
                )

    def test_per_center_centering_stays_local(self, signal_data):
        with partition(signal_data, 4, seed=1, centering="per_center") as cohort:
            for d in cohort.datasets:
                np.testing.assert_allclose(d.covariates.mean(axis=0), 0.0, atol=1e-14)
            assert cohort.ledger.total_floats == 0

    def test_unequal_centers_are_rejected(self):
        with pytest.raises(InvalidArgumentError, match="equal sizes"):
            FederatedCohort([make_dataset(10, 2, seed=0), make_dataset(12, 2, seed=1)])

    def test_bad_principal(self, small_data):
        with pytest.raises(InvalidArgumentError, match="principal"):
            FederatedCohort([small_data], principal=1)


class TestGradients:
    def test_single_center_equals_full_data(self, signal_data):
        beta = np.array([0.1, 0.5, -0.5, 0.2, 0.0, -0.1])
        with partition(signal_data, 1) as cohort:
            np.testing.assert_array_equal(aggregate_gradient(cohort, beta), gradient(signal_data, beta))

    def test_per_center_gradients_are_exact(self, signal_data):
        beta = np.array([0.1, 0.5, -0.5, 0.2, 0.0, -0.1])
        with partition(signal_data, 2, seed=4) as cohort:
            grads = cohort.local_gradients(beta)[0]
            for k, block in enumerate(cohort.blocks):
                np.testing.assert_array_equal(grads[k], gradient(signal_data.subset(block), beta))

    @pytest.mark.parametrize("kind", ["stream", "jsonl"])
    def test_transports_agree_bit_for_bit(self, signal_data, kind):
        betas = np.random.default_rng(2).normal(scale=0.3, size=(3, 6))
        with partition(signal_data, 4, seed=4) as reference, partition(signal_data, 4, seed=4, transport=kind) as other:
            np.testing.assert_array_equal(other.local_gradients(betas), reference.local_gradients(betas))
            assert other.ledger.snapshot() == reference.ledger.snapshot()

    def test_round_is_counted_once_down_and_k_times_up(self, cohort):
        cohort.local_gradients(np.zeros(cohort.p), use_cache=False)
        assert cohort.ledger.down_floats == cohort.p
        assert cohort.ledger.down_messages == 1
        assert cohort.ledger.up_floats == cohort.K * cohort.p
        assert cohort.ledger.up_messages == cohort.K
        assert cohort.ledger.up_bytes > 8 * cohort.K * cohort.p

    def test_cache_skips_repeat_rounds(self, cohort):
        beta = np.full(cohort.p, 0.1)
        first = cohort.local_gradients(beta)
        floats = cohort.ledger.total_floats
        np.testing.assert_array_equal(cohort.local_gradients(beta), first)
        assert cohort.ledger.total_floats == floats
        cohort.local_gradients(beta, use_cache=False)
        assert cohort.ledger.total_floats == 2 * floats

    def test_large_requests_are_batched(self, cohort):
        betas = np.random.default_rng(0).normal(scale=0.1, size=(6, cohort.p))
        grads = cohort.local_gradients(betas)
        assert grads.shape == (6, cohort.K, cohort.p)
        assert cohort.ledger.by_type["grad_request"] == 2

    def test_center_error_becomes_round_failure(self, cohort):
        with pytest.raises(RoundFailure) as info:
            cohort.solve_ws(np.zeros(cohort.p), 0.1, coord=cohort.p + 3)
        assert info.value.center == 0
        assert cohort.ledger.by_type["error"] == cohort.K

    def test_center_error_over_stream(self, signal_data):
        with partition(signal_data, 2, transport="stream") as cohort:
            with pytest.raises(RoundFailure):
                cohort.solve_ws(np.zeros(cohort.p), 0.1, coord=cohort.p + 3)
            # the connection survives a failed round
            assert cohort.local_gradients(np.zeros(cohort.p)).shape == (1, 2, cohort.p)


class TestTransport:
    def test_subject_rows_never_leave_a_center(self):
        transport = InProcessTransport([LeakyCenter(np.ones((30, 3)))], CommLedger())
        try:
            with pytest.raises(PrivacyViolationError):
                transport.exchange(Message.grad_request(1, np.zeros(3)))
        finally:
            transport.close()

    def test_timeout(self):
        transport = InProcessTransport([SlowCenter()], CommLedger(), timeout=0.05)
        try:
            with pytest.raises(RoundFailure, match="did not answer"):
                transport.exchange(Message.grad_request(1, np.zeros(2)))
        finally:
            transport.close()

    def test_late_stream_reply_is_not_taken_for_the_next_round(self, signal_data, monkeypatch):
        with partition(signal_data, 2, transport="stream", timeout=0.5) as cohort:
            center = cohort.centers[0]
            handle = center.handle
            calls = []

            def sleeps_on_first_call(request):
                calls.append(request.round)
                if len(calls) == 1:
                    time.sleep(1.0)
                return handle(request)

            monkeypatch.setattr(center, "handle", sleeps_on_first_call)
            with pytest.raises(RoundFailure, match="did not answer"):
                aggregate_gradient(cohort, np.zeros(cohort.p))

            beta = np.ones(cohort.p)
            expected = np.mean([gradient(d, beta) for d in cohort.datasets], axis=0)
            np.testing.assert_allclose(aggregate_gradient(cohort, beta), expected, rtol=1e-13)

    def test_reply_to_another_round_is_rejected(self):
        class OffByOneCenter:
            def handle(self, request):
                return Message(MessageType.GRAD_REPLY, request.round + 1, (np.zeros((1, 2)),))

        transport = InProcessTransport([OffByOneCenter()], CommLedger())
        try:
            with pytest.raises(RoundFailure, match="answered round 8"):
                transport.exchange(Message.grad_request(7, np.zeros(2)))
        finally:
            transport.close()

    def test_request_count_must_match_centers(self, cohort):
        with pytest.raises(InvalidArgumentError):
            cohort.transport.exchange([Message.grad_request(1, np.zeros(cohort.p))])

    def test_unknown_transport(self):
        with pytest.raises(InvalidArgumentError):
            make_transport("carrier-pigeon", [], CommLedger())
