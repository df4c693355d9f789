"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--size PIXELS]

Renders every shipped toy scene forward and backward with each available
backend, reports the median wall time per frame and checks that the two
backends produce the same image.
"""

import argparse
import statistics
import time

import numpy as np

from dpges import kernels
from dpges.autodiff import backward
from dpges.composite import render
from dpges.scene import Camera
from dpges.toys import SHIPPED, bundled_recipe, init_toy, make_cameras


def scenes(size):
    for name in SHIPPED:
        r = bundled_recipe(name)
        cam = make_cameras(r["cameras"])[0]
        cam = Camera.from_json({**cam.to_json(), "width": size, "height": size,
                                "cx": size / 2, "cy": size / 2,
                                "fx": cam.fx * size / cam.width, "fy": cam.fy * size / cam.height})
        yield name, init_toy(r), cam


def time_it(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args()

    backends = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(backends)}; {args.size}x{args.size}, median of {args.repeats}")
    header = f"{'scene':<14}{'surfels':>8}{'gauss':>7}"
    for b in backends:
        header += f"{b + ' fwd ms':>16}{b + ' bwd ms':>16}"
    if len(backends) > 1:
        header += f"{'speedup':>9}{'max diff':>11}"
    print(header)
    for name, scene, cam in scenes(args.size):
        row = f"{name:<14}{scene.num_surfels:>8}{scene.num_gaussians:>7}"
        images, fwd = {}, {}
        for b in backends:
            kernels.set_backend(b)
            frame = render(scene, cam)
            images[b] = frame.image
            d_img = np.ones_like(frame.image)
            fwd[b] = time_it(lambda: render(scene, cam), args.repeats)
            bwd = time_it(lambda: backward(frame, d_img), args.repeats)
            row += f"{1000 * fwd[b]:>16.1f}{1000 * bwd:>16.1f}"
        if len(backends) > 1:
            diff = float(np.max(np.abs(images["cython"] - images["python"])))
            row += f"{fwd['python'] / fwd['cython']:>8.1f}x{diff:>11.1e}"
        print(row)


if __name__ == "__main__":
    main()
