"""Binary containers and JSONL traces."""
