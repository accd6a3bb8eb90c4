"""Quantizer table/codes/scale/packing and size accounting."""

import numpy as np
import pytest

import quantsep.quant as quant
import quantsep.sepnet as sepnet


class TestBuildTable:
    def test_two_bit_structure(self):
        np.testing.assert_allclose(quant.build_table(2, 0.5), [-0.5, 0.0, 0.5])

    def test_four_bit_range(self):
        np.testing.assert_allclose(quant.build_table(4, 1.0), np.arange(-7, 8))

    def test_eight_bit_count_and_max(self):
        t = quant.build_table(8, 0.01)
        assert len(t) == 255
        # one bit carries the sign: the largest magnitude is alpha*(2^(n-1)-1)
        np.testing.assert_allclose(t.max(), 0.01 * 127)
        np.testing.assert_allclose(t, -t[::-1])  # symmetric about zero

    def test_minimum_two_bits_enforced(self):
        with pytest.raises(quant.QuantError, match="2-bit"):
            quant.build_table(1, 1.0)
        with pytest.raises(quant.QuantError):
            quant.quantize_values([0.1], 1, 1.0)

    def test_positive_scale_required(self):
        with pytest.raises(quant.QuantError, match="positive"):
            quant.build_table(4, 0.0)


class TestQuantizeValues:
    def test_nearest_neighbor(self):
        assert quant.quantize_values([0.3], 2, 0.5)[0] == 1

    def test_midpoint_breaks_toward_zero(self):
        assert quant.quantize_values([0.25], 2, 0.5)[0] == 0
        assert quant.quantize_values([-0.25], 2, 0.5)[0] == 0
        assert quant.quantize_values([0.75], 2, 0.5)[0] == 1

    def test_out_of_range_clamps(self):
        assert quant.quantize_values([9.0], 4, 1.0)[0] == 7
        assert quant.quantize_values([-9.0], 4, 1.0)[0] == -7

    def test_codes_always_in_table(self):
        rng = np.random.default_rng(0)
        for n in (2, 4, 8, 16):
            w = rng.standard_normal(10_000)
            codes = quant.quantize_values(w, n, 0.05)
            m = 2 ** (n - 1) - 1
            assert codes.max() <= m and codes.min() >= -m

    def test_error_bounded_by_half_alpha_in_range(self):
        rng = np.random.default_rng(1)
        for n in (2, 4, 8):
            alpha = 0.1
            m = 2 ** (n - 1) - 1
            w = rng.uniform(-alpha * m, alpha * m, 5000)
            err = np.abs(w - quant.quant_dequant(w, n, alpha))
            assert err.max() <= alpha / 2 + 1e-12

    def test_dequantize_is_code_times_alpha(self):
        np.testing.assert_allclose(quant.dequantize_values([3], 0.25), [0.75])

    def test_quant_dequant_fixed_point(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(1000)
        q1 = quant.quant_dequant(w, 4, 0.1)
        q2 = quant.quant_dequant(q1, 4, 0.1)
        np.testing.assert_array_equal(q1, q2)


class TestFitScale:
    def test_two_point_cluster_exact(self):
        alpha = quant.fit_scale(np.array([-1.0, 1.0]), 2)
        assert alpha == 1.0
        assert not (np.array([-1.0, 1.0]) - quant.quant_dequant([-1.0, 1.0], 2, alpha)).any()

    def test_grid_search_oracle_confirms_minimizer(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(400)
        for n in (2, 4):
            alpha = quant.fit_scale(w, n)
            mse = np.mean((w - quant.quant_dequant(w, n, alpha)) ** 2)
            base = np.max(np.abs(w)) / (2 ** (n - 1) - 1)
            grid = np.linspace(0.3 * base, 1.5 * base, 2000)
            grid_best = min(
                float(np.mean((w - quant.quant_dequant(w, n, a)) ** 2)) for a in grid
            )
            assert mse <= grid_best * (1 + 1e-6)

    def test_beats_absmax_on_uniform_weights(self):
        rng = np.random.default_rng(4)
        w = rng.uniform(-1, 1, 20_000)
        alpha = quant.fit_scale(w, 8)
        absmax = quant.fit_scale(w, 8, method="absmax")
        mse_fit = np.mean((w - quant.quant_dequant(w, 8, alpha)) ** 2)
        mse_absmax = np.mean((w - quant.quant_dequant(w, 8, absmax)) ** 2)
        assert mse_fit <= mse_absmax

    def test_constant_magnitude_cluster(self):
        w = np.full(10, 0.4)
        alpha = quant.fit_scale(w, 2)
        np.testing.assert_allclose(alpha, 0.4)
        np.testing.assert_allclose(quant.quant_dequant(w, 2, alpha), w)

    def test_all_zero_cluster(self):
        assert quant.fit_scale(np.zeros(5), 4) == 1.0
        assert not quant.quantize_values(np.zeros(5), 4, 1.0).any()

    def test_scale_equivariance_power_of_two(self):
        # power-of-two scalings are exact in floating point, so codes must
        # match exactly and alpha must scale linearly
        rng = np.random.default_rng(5)
        w = rng.standard_normal(300)
        for n in (2, 4, 8):
            alpha = quant.fit_scale(w, n)
            codes = quant.quantize_values(w, n, alpha)
            for c in (0.5, 2.0, 1024.0):
                alpha_c = quant.fit_scale(c * w, n)
                np.testing.assert_allclose(alpha_c, c * alpha, rtol=0, atol=0)
                np.testing.assert_array_equal(
                    quant.quantize_values(c * w, n, alpha_c), codes
                )

    def test_monotone_fidelity_in_bits(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal(5000)
        mses = []
        for n in (2, 4, 8, 16):
            alpha = quant.fit_scale(w, n)
            mses.append(float(np.mean((w - quant.quant_dequant(w, n, alpha)) ** 2)))
        assert mses == sorted(mses, reverse=True)


class TestPacking:
    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_round_trip_random(self, n):
        rng = np.random.default_rng(n)
        m = 2 ** (n - 1) - 1
        codes = rng.integers(-m, m + 1, size=10_001)
        buf = quant.pack_codes(codes, n)
        assert len(buf) == quant.packed_nbytes(len(codes), n)
        np.testing.assert_array_equal(quant.unpack_codes(buf, n, len(codes)), codes)

    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_boundary_codes(self, n):
        m = 2 ** (n - 1) - 1
        codes = np.array([-(m + 1), -m, -1, 0, 1, m])  # includes the defensive extreme
        out = quant.unpack_codes(quant.pack_codes(codes, n), n, len(codes))
        np.testing.assert_array_equal(out, codes)

    def test_million_codes_bit_exact(self):
        rng = np.random.default_rng(7)
        codes = rng.integers(-7, 8, size=1_000_000)
        out = quant.unpack_codes(quant.pack_codes(codes, 4), 4, len(codes))
        np.testing.assert_array_equal(out, codes)

    def test_out_of_range_rejected(self):
        with pytest.raises(quant.QuantError, match="range"):
            quant.pack_codes(np.array([8]), 4)

    def test_byte_boundary_padding(self):
        assert len(quant.pack_codes(np.array([1, -1, 1]), 2)) == 1
        assert len(quant.pack_codes(np.array([1, -1, 1, 0, 1]), 2)) == 2


class TestModelQuantization:
    def test_round_trip_through_file(self, trained_tiny_model, tmp_path):
        entries = sepnet.quantizable_clusters(trained_tiny_model)
        bits_map = {e.cluster_id: 8 for e in entries}
        packed = quant.quantize_model(trained_tiny_model, bits_map)
        path = tmp_path / "m.qsep"
        quant.write_packed(packed, path)
        loaded = quant.read_packed(path)
        assert loaded.manifest == packed.manifest
        assert loaded.blob == packed.blob

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.qsep"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(quant.QuantError, match="magic"):
            quant.read_packed(path)

    def test_dequantize_reconstruction_close_at_16_bits(self, trained_tiny_model):
        entries = sepnet.quantizable_clusters(trained_tiny_model)
        packed = quant.quantize_model(
            trained_tiny_model, {e.cluster_id: 16 for e in entries}
        )
        restored = quant.dequantize_model(packed, trained_tiny_model)
        for e in entries:
            w = sepnet.get_cluster_values(trained_tiny_model, e)
            wq = sepnet.get_cluster_values(restored, e)
            scale = np.abs(w).max()
            assert np.abs(w - wq).max() <= scale / 2**15

    def test_census_mismatch_rejected(self, trained_tiny_model):
        entries = sepnet.quantizable_clusters(trained_tiny_model)
        packed = quant.quantize_model(
            trained_tiny_model, {e.cluster_id: 4 for e in entries}
        )
        packed.manifest["clusters"][0]["id"] = "tcn9.conv9.ghost.weight"
        with pytest.raises(quant.QuantError, match="census mismatch"):
            quant.dequantize_model(packed, trained_tiny_model)

    def test_unquantized_params_untouched(self, trained_tiny_model):
        entries = sepnet.quantizable_clusters(trained_tiny_model)
        packed = quant.quantize_model(
            trained_tiny_model, {e.cluster_id: 2 for e in entries}
        )
        restored = quant.dequantize_model(packed, trained_tiny_model)
        for name, p in trained_tiny_model.params.items():
            if not any(name in e.params for e in entries):
                np.testing.assert_array_equal(p.data, restored.params[name].data)


class TestModelSize:
    def test_full_precision_reference_size(self):
        # 8.8e6 parameters at 32 bits is 35.2 (decimal) MB
        assert 8_800_000 * 4 / 1e6 == 35.2

    def test_hand_computed_sizes(self, tiny_model):
        entries = sepnet.census(tiny_model)
        q = [e for e in entries if e.quantizable]
        bits_map = {e.cluster_id: (2 if i % 2 else 4) for i, e in enumerate(q)}
        report = quant.model_size(entries, bits_map)
        expected_bits = sum(e.count * bits_map[e.cluster_id] for e in q)
        assert report.quantized_bits == expected_bits
        assert report.avg_bits == expected_bits / sum(e.count for e in q)
        assert report.scale_bits == 32 * len(q)
        expected_packed = sum(
            (e.count * bits_map[e.cluster_id] + 7) // 8 for e in q
        )
        assert report.packed_blob_bytes == expected_packed
        assert report.full_precision_bytes == 4 * sum(e.count for e in entries)

    def test_uniform_ratio_is_32_over_n(self, tiny_model):
        entries = sepnet.census(tiny_model)
        q = [e for e in entries if e.quantizable]
        for n in (2, 4, 8, 16):
            report = quant.model_size(entries, {e.cluster_id: n for e in q})
            assert report.quantized_fraction_ratio == 32 / n
            # headers and unquantized parameters make the end-to-end ratio smaller
            assert report.end_to_end_ratio < 32 / n

    def test_weighted_average_bits(self):
        entries = [
            sepnet.CensusEntry("a", 100, "conv1x1", True, ("a",)),
            sepnet.CensusEntry("b", 300, "conv1x1", True, ("b",)),
        ]
        report = quant.model_size(entries, {"a": 2, "b": 4})
        assert report.avg_bits == 3.5
