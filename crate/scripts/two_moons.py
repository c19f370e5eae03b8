#!/usr/bin/env python3
"""Write a two-moons classification set as `label,x,y` CSV.

    python3 scripts/two_moons.py data/two-moons/train.csv 400 1
    python3 scripts/two_moons.py data/two-moons/test.csv 200 2
"""
import math
import random
import sys


def main():
    path, n, seed = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    rng = random.Random(seed)
    with open(path, "w") as f:
        f.write("label,x,y\n")
        for i in range(n):
            label = i % 2
            t = rng.uniform(0.0, math.pi)
            if label == 0:
                x, y = math.cos(t), math.sin(t)
            else:
                x, y = 1.0 - math.cos(t), 0.5 - math.sin(t)
            x += rng.gauss(0.0, 0.1)
            y += rng.gauss(0.0, 0.1)
            f.write(f"{label},{x:.6f},{y:.6f}\n")


if __name__ == "__main__":
    main()
