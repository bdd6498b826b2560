"""Tests for deAPI MCP Server."""