"""Step 01: 2Dナビゲーション環境 - テストモジュール

このステップでは、タスク定義・行動の射影・終端報酬・専門家の行動を確認します。
"""
