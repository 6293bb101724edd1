"""All-in-one restoration network with task-adaptive routing."""
