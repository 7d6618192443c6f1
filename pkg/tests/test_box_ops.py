import numpy as np
import pytest

from util.box_ops import build_anchors, clip_boxes, decode, encode, iou, iou_matrix, nms, nms_per_class, to_map_coords


def random_boxes(rng, count, extent=64.0, min_size=2.0):
    x1 = rng.uniform(0, extent - min_size, size=count)
    y1 = rng.uniform(0, extent - min_size, size=count)
    w = rng.uniform(min_size, extent / 2, size=count)
    h = rng.uniform(min_size, extent / 2, size=count)
    return np.stack([x1, y1, np.minimum(x1 + w, extent), np.minimum(y1 + h, extent)], axis=1)


def rasterized_iou(a, b, scale=4):
    """Pixel-count IoU on a grid `scale` times finer than integer coordinates."""
    size = int(max(a[2], a[3], b[2], b[3])) * scale + 1
    ys, xs = np.mgrid[0:size, 0:size] / scale + 0.5 / scale

    def mask(box):
        return (xs >= box[0]) & (xs < box[2]) & (ys >= box[1]) & (ys < box[3])

    ma, mb = mask(a), mask(b)
    return (ma & mb).sum() / (ma | mb).sum()


def brute_force_nms(boxes, scores, threshold):
    alive = list(range(len(scores)))
    keep = []
    while alive:
        best = max(alive, key=lambda i: (scores[i], -i))
        keep.append(best)
        alive = [i for i in alive if i != best and iou(boxes[best], boxes[i]) <= threshold]
    return keep


class TestIoU:
    def test_identical_boxes(self):
        assert iou([1, 2, 5, 7], [1, 2, 5, 7]) == 1.0

    def test_disjoint_boxes(self):
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0

    def test_half_offset_unit_squares(self):
        assert iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) == pytest.approx(1.0 / 3.0)

    def test_matches_rasterization(self):
        a, b = [2, 2, 10, 8], [5, 4, 14, 12]
        assert iou(a, b) == pytest.approx(rasterized_iou(a, b), abs=1e-9)

    def test_empty_inputs(self):
        assert iou_matrix(np.zeros((0, 4)), np.ones((3, 4))).shape == (0, 3)

    def test_bounded(self, rng):
        overlaps = iou_matrix(random_boxes(rng, 30), random_boxes(rng, 20))
        assert np.all((overlaps >= 0) & (overlaps <= 1))


class TestNMS:
    def test_matches_brute_force(self, rng):
        for _ in range(200):
            count = int(rng.integers(1, 25))
            boxes = random_boxes(rng, count, extent=32.0)
            # coarse scores produce ties
            scores = np.round(rng.uniform(size=count), 1)
            threshold = float(rng.choice([0.3, 0.5, 0.7]))
            assert nms(boxes, scores, threshold).tolist() == brute_force_nms(boxes, scores, threshold)

    def test_per_class_never_suppresses_across_classes(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
        keep = nms_per_class(boxes, np.array([0.9, 0.8, 0.7]), np.array([0, 1, 0]), 0.5)
        assert keep.tolist() == [0, 1]

    def test_kept_boxes_do_not_overlap(self, rng):
        boxes = random_boxes(rng, 40)
        keep = nms(boxes, rng.uniform(size=40), 0.5)
        overlaps = iou_matrix(boxes[keep], boxes[keep])
        np.fill_diagonal(overlaps, 0.0)
        assert overlaps.max() <= 0.5


class TestAnchors:
    def test_matches_enumeration(self, rng):
        for _ in range(200):
            stride = int(rng.choice([2, 4, 8]))
            map_h, map_w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            scales = sorted(rng.choice([4.0, 8.0, 16.0, 32.0], size=int(rng.integers(1, 3)), replace=False))
            ratios = sorted(rng.choice([0.5, 1.0, 2.0], size=int(rng.integers(1, 4)), replace=False))
            image_h, image_w = map_h * stride, map_w * stride
            expected = []
            for i in range(map_h):
                for j in range(map_w):
                    for s in scales:
                        for r in ratios:
                            cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
                            w, h = s / np.sqrt(r), s * np.sqrt(r)
                            expected.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            expected = np.array(expected)
            anchors, slots = build_anchors(map_h, map_w, scales, ratios, stride, image_h, image_w, mode="inference")
            np.testing.assert_allclose(anchors, clip_boxes(expected, image_h, image_w))
            np.testing.assert_array_equal(slots, np.arange(len(expected)))

            inside, kept = build_anchors(map_h, map_w, scales, ratios, stride, image_h, image_w, mode="train")
            mask = (expected[:, 0] >= 0) & (expected[:, 1] >= 0) & (expected[:, 2] <= image_w) & (expected[:, 3] <= image_h)
            np.testing.assert_allclose(inside, expected[mask])
            np.testing.assert_array_equal(kept, np.flatnonzero(mask))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_anchors(2, 2, [4.0], [1.0], 4, 8, 8, mode="bogus")


class TestEncoding:
    def test_decode_inverts_encode(self, rng):
        anchors, boxes = random_boxes(rng, 50), random_boxes(rng, 50)
        np.testing.assert_allclose(decode(encode(boxes, anchors), anchors), boxes, atol=1e-9)

    def test_identity_for_the_anchor_itself(self):
        box = np.array([[3.0, 4.0, 11.0, 20.0]])
        np.testing.assert_allclose(encode(box, box), 0.0)


def test_map_coords_align_corners():
    mapped = to_map_coords(np.array([[0.0, 0.0, 64.0, 32.0]]), (32, 64), (8, 16))
    np.testing.assert_allclose(mapped, [[0.0, 0.0, 15.0, 7.0]])
