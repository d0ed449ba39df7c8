"""Step 03: 方策とロールアウト - テストモジュール

このステップでは、サロゲート方策、ロールアウト、外部方策の行プロトコルと
そのサーバー・クライアントを確認します。
"""
