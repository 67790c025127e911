"""Shared fixtures: a stub encoder and canned inputs for pipeline tests."""

import sys
import textwrap

import pytest

# Sleeps like an encoder (longer for slower presets), writes a fake
# bitstream, and prints x265-style summary lines with a known Avg QP.
STUB_ENCODER = textwrap.dedent(
    '''
    import argparse
    import sys
    import time
    from pathlib import Path

    FACTORS = {
        "ultrafast": 1.0, "superfast": 1.3, "veryfast": 1.6, "faster": 1.9,
        "fast": 2.2, "medium": 2.5, "slow": 3.0, "slower": 3.5, "veryslow": 4.0,
    }

    def main():
        ap = argparse.ArgumentParser()
        ap.add_argument("--input", required=True)
        ap.add_argument("--output", required=True)
        ap.add_argument("--preset", required=True)
        ap.add_argument("--crf", type=float, required=True)
        ap.add_argument("--frames", type=int, required=True)
        ap.add_argument("--base-sleep", type=float, default=0.25)
        ap.add_argument("--no-qp", action="store_true")
        ap.add_argument("--fail", action="store_true")
        ap.add_argument("--fail-count-file", default=None)
        ap.add_argument("--fail-on", type=int, default=-1)
        ap.add_argument("--call-log", default=None)
        args = ap.parse_args()

        if args.call_log:
            with open(args.call_log, "a") as fh:
                fh.write(f"{args.preset} {args.crf:g}\\n")
        if args.fail:
            print("stub: simulated encoder crash", file=sys.stderr)
            return 3
        if args.fail_count_file is not None:
            counter = Path(args.fail_count_file)
            count = int(counter.read_text()) + 1 if counter.exists() else 1
            counter.write_text(str(count))
            if count == args.fail_on:
                print(f"stub: injected failure on call {count}", file=sys.stderr)
                return 1

        duration = args.base_sleep * FACTORS[args.preset] * (1.0 + (28.0 - args.crf) * 0.01)
        time.sleep(duration)
        Path(args.output).write_bytes(b"\\x42" * max(64, 1200 - int(args.crf * 10)))
        print("x265 [info]: HEVC encoder version (stub)")
        if not args.no_qp:
            print(f"x265 [info]: frame I:    1, Avg QP:{args.crf + 0.87:.2f}  kb/s: 2000.00")
            print(f"x265 [info]: frame P:   {args.frames - 1}, Avg QP:{args.crf + 2.13:.2f}  kb/s: 900.00")
        print(f"encoded {args.frames} frames of {args.input} ({args.preset}) in {duration:.3f} s")
        return 0

    if __name__ == "__main__":
        sys.exit(main())
    '''
)


@pytest.fixture(scope="session")
def stub_encoder(tmp_path_factory):
    path = tmp_path_factory.mktemp("stub") / "stub_encoder.py"
    path.write_text(STUB_ENCODER)
    return path


@pytest.fixture(scope="session")
def input_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("seq") / "clip.yuv"
    path.write_bytes(b"\x10" * 4096)
    return path


@pytest.fixture
def encoder_cmd(stub_encoder):
    return (
        f"{sys.executable} {stub_encoder} --input {{input}} --output {{output}} "
        f"--preset {{preset}} --crf {{crf}} --frames {{frames}}"
    )
