"""Runs the bridge as ``python -m denoiser_bridge``."""

from .server import main

if __name__ == "__main__":
    raise SystemExit(main())
