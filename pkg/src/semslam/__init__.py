"""Object-level semantic SLAM back-end with a deterministic simulator."""
