"""DLTM-ECG encoder, training stack and metrics on a small numpy autodiff core."""
