//! Episodic learning loop, diagnostics and serialization (in progress).
