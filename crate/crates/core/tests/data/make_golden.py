# Writes overlay_golden.rgb: a 24x16 gradient frame with a car box and a
# truck polygon composited at alpha 0.7, using exact rational arithmetic.
from fractions import Fraction as F

W, H = 24, 16
ALPHA = F(7, 10)
frame = [[[x * 10, y * 15, (x + y) * 5] for x in range(W)] for y in range(H)]


def in_box(cx, cy):
    x, y, w, h = F(2), F(3), F(19, 2), F(6)
    return x <= cx < x + w and y <= cy < y + h


def in_poly(cx, cy):
    pts = [(F(8), F(2)), (F(22), F(4)), (F(18), F(14)), (F(6), F(12))]
    inside = False
    for i in range(len(pts)):
        (xi, yi), (xj, yj) = pts[i], pts[i - 1]
        if (yi > cy) != (yj > cy) and cx < (xj - xi) * (cy - yi) / (yj - yi) + xi:
            inside = not inside
    return inside


def blend(v, fill):
    t = ALPHA * fill + (1 - ALPHA) * v
    return min(255, int(t + F(1, 2)))


# higher confidence first: car (0.9), then truck (0.6)
for test, fill in [(in_box, (0, 255, 255)), (in_poly, (255, 0, 255))]:
    for y in range(H):
        for x in range(W):
            if test(x + F(1, 2), y + F(1, 2)):
                frame[y][x] = [blend(frame[y][x][c], fill[c]) for c in range(3)]

with open("overlay_golden.rgb", "wb") as f:
    f.write(bytes(v for row in frame for px in row for v in px))
