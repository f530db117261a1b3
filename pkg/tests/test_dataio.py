import numpy as np
import pytest

from flashpip.dataio import (CheckpointError, generate_scene,
                             load_checkpoint, make_dataset, pfm_read, pfm_write,
                             read_manifest, save_checkpoint, stack_samples,
                             write_manifest)
from flashpip.model import ModelConfig, RefineModel
from flashpip.tensor import Tensor


class TestSceneGeneration:
    def test_zero_disparity_everywhere_means_identical_views(self):
        s = generate_scene(0, 40, 48, d_max=8, n_layers=1,
                           layer_disparities=[0], bg_disparity=0)
        np.testing.assert_array_equal(s.left.data, s.right.data)

    def test_full_frame_layer_pure_shift(self):
        s = generate_scene(1, 40, 48, d_max=8, n_layers=1,
                           layer_disparities=[3], bg_disparity=0, full_frame=True)
        np.testing.assert_array_equal(s.gt_disparity.data,
                                      np.full((1, 1, 40, 48), 3.0, np.float32))
        left, right = s.left.data[0, 0], s.right.data[0, 0]
        # x_right = x_left - 3, so right column x matches left column x + 3
        np.testing.assert_array_equal(right[:, :45], left[:, 3:])

    def test_determinism(self):
        a = generate_scene(42, 40, 56, 8, 3)
        b = generate_scene(42, 40, 56, 8, 3)
        assert a.left.data.tobytes() == b.left.data.tobytes()
        assert a.right.data.tobytes() == b.right.data.tobytes()
        assert a.gt_disparity.data.tobytes() == b.gt_disparity.data.tobytes()

    def test_different_seeds_differ(self):
        a = generate_scene(1, 40, 56, 8, 3)
        b = generate_scene(2, 40, 56, 8, 3)
        assert a.left.data.tobytes() != b.left.data.tobytes()

    @pytest.mark.parametrize("seed", range(6))
    def test_warp_consistency_non_occluded(self, seed):
        s = generate_scene(seed, 40, 56, d_max=8, n_layers=3)
        left = s.left.data[0, 0]
        right = s.right.data[0, 0]
        gt = s.gt_disparity.data[0, 0].astype(int)
        H, W = left.shape
        checked = mismatched = 0
        for y in range(H):
            for x in range(W):
                xr = x - gt[y, x]
                if xr < 0:
                    continue
                # occluded if some other pixel with larger disparity also
                # lands on xr; skip those
                occluded = False
                for x2 in range(W):
                    if x2 != x and x2 - gt[y, x2] == xr and gt[y, x2] > gt[y, x]:
                        occluded = True
                        break
                if occluded:
                    continue
                checked += 1
                if left[y, x] != right[y, xr]:
                    mismatched += 1
        assert checked > 0
        assert mismatched == 0

    def test_gt_range(self):
        s = generate_scene(7, 40, 56, d_max=8, n_layers=4)
        assert s.gt_disparity.data.min() >= 0
        assert s.gt_disparity.data.max() <= 8

    def test_degenerate_dimensions(self):
        with pytest.raises(ValueError, match="H,W"):
            generate_scene(0, 16, 96)
        with pytest.raises(ValueError, match="n_layers"):
            generate_scene(0, 64, 96, n_layers=0)

    def test_stack_and_dataset(self):
        ds = make_dataset([1, 2, 3], H=32, W=40, d_max=4, n_layers=2)
        left, right, gt = stack_samples(ds)
        assert left.data.shape == (3, 1, 32, 40)
        assert gt.data.shape == (3, 1, 32, 40)


class TestManifest:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "manifest.txt"
        write_manifest(p, [5, 6, 7])
        assert read_manifest(p) == [5, 6, 7]


class TestPfm:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        disp = rng.uniform(0, 16, (20, 30)).astype(np.float32)
        p = tmp_path / "d.pfm"
        pfm_write(disp, p)
        back = pfm_read(p)
        assert back.data.tobytes() == disp.tobytes()

    def test_round_trip_from_tensor(self, tmp_path):
        disp = Tensor(np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4))
        p = tmp_path / "d.pfm"
        pfm_write(disp, p)
        assert pfm_read(p).data.tobytes() == disp.data[0, 0].tobytes()

    def test_byte_level_layout(self, tmp_path):
        import struct
        p = tmp_path / "one.pfm"
        pfm_write(np.array([[2.5]], dtype=np.float32), p)
        want = b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 2.5)
        assert p.read_bytes() == want

    def test_color_pfm_rejected(self, tmp_path):
        p = tmp_path / "c.pfm"
        p.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(ValueError, match="3 channels"):
            pfm_read(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "bad.pfm"
        p.write_bytes(b"Px\n1 1\n-1.0\n")
        with pytest.raises(ValueError, match="magic"):
            pfm_read(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pfm"
        p.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 7)
        with pytest.raises(ValueError, match="truncated"):
            pfm_read(p)

    def test_multichannel_write_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="single-channel"):
            pfm_write(np.zeros((2, 3, 4), np.float32), tmp_path / "x.pfm")


class TestCheckpoint:
    def make_model(self):
        cfg = ModelConfig(feat_channels=4, hidden_channels=6, kernel_size=3,
                          d_max=5, lookup_radius=2)
        return RefineModel(cfg, seed=3)

    def test_round_trip_bitwise(self, tmp_path):
        m = self.make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m, {"seed": 3, "step": 17, "stage": 0})
        m2, meta = load_checkpoint(p)
        assert meta == {"seed": 3, "step": 17, "stage": 0}
        for name, t in m.named_parameters().items():
            t2 = m2.named_parameters()[name]
            assert t.data.tobytes() == t2.data.tobytes(), name

    def test_truncated_file(self, tmp_path):
        m = self.make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m)
        data = p.read_bytes()
        p.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_unknown_version_names_both(self, tmp_path):
        m = self.make_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, m)
        data = bytearray(p.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="99"):
            load_checkpoint(p)
        with pytest.raises(CheckpointError, match="1"):
            load_checkpoint(p)

    def test_magic_mismatch(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)
